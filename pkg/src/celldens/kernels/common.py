"""Constants shared by both kernel backends."""

# vector-field identifiers
MODEL_GROWTH2D = 0
MODEL_GENE_EXPR3D = 1

# integration status codes (per trajectory)
OK = 0
STEP_UNDERFLOW = 1
NON_FINITE = 2
MAX_STEPS_EXCEEDED = 3

STATUS_LABELS = {
    OK: "ok",
    STEP_UNDERFLOW: "step-size underflow",
    NON_FINITE: "non-finite state",
    MAX_STEPS_EXCEEDED: "step budget exceeded",
}

# step-size controller
SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
UNDERFLOW_FACTOR = 1e-14
MAX_STEPS = 1_000_000
