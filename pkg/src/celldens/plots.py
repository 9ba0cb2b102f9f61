"""Vector-graphics output: error curves and density-snapshot panels."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np
import yaml

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import gmd as gmdlib
from .config import ExperimentConfig
from .errors import CellDensError
from .gmd import GMD
from .models import ModelSpec
from .reference import CellEnsemble, reference_kde

_COLORS = {"charest": "tab:blue", "gridpf": "tab:orange"}


class NothingToPlot(CellDensError):
    """The run directory holds no plottable results."""


def _read_errors_csv(path: Path):
    header = None
    rows = []
    for line in path.read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append([float(v) for v in line.split(",")])
    data = np.array(rows)
    return header, data


def _plot_error_curves(run_dir: Path, plots_dir: Path, state_names):
    written = []
    for name in state_names:
        path = run_dir / f"errors_{name}.csv"
        if not path.exists():
            continue
        header, data = _read_errors_csv(path)
        t = data[:, 0]
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for j in range(1, len(header), 2):
            est = header[j].removesuffix("_mean")
            mean = data[:, j]
            std = data[:, j + 1]
            color = _COLORS.get(est)
            ax.plot(t, mean, label=est, color=color)
            if np.any(std > 0):
                ax.fill_between(t, mean - std, mean + std, alpha=0.25, color=color)
        ax.set_xlabel("time")
        ax.set_ylabel(f"L1 error of the {name} marginal")
        ax.legend()
        fig.tight_layout()
        out = plots_dir / f"errors_{name}.svg"
        fig.savefig(out)
        plt.close(fig)
        written.append(out)
    return written


def _gmd_curve(g: GMD, x: np.ndarray) -> np.ndarray:
    return gmdlib.eval_points(g, x[:, None])


def _plot_density_panels(cfg, run_dir: Path, plots_dir: Path):
    """Reference / estimate / measured marginals at the configured times."""
    written = []
    model = cfg.model
    times = cfg.times
    ref_path = run_dir / "reference" / "run_000.npz"
    if not ref_path.exists() or not cfg.plot_times:
        return written
    with np.load(ref_path) as ref:
        cells = ref["cells"]
    results = {}
    for est in cfg.estimators:
        p = run_dir / f"{est}_results" / "run_000.json"
        if p.exists():
            results[est] = json.loads(p.read_text())["steps"]
    snap_path = run_dir / "snapshots" / "run_000.json"
    snapshots = json.loads(snap_path.read_text()) if snap_path.exists() else None

    for dim, name in enumerate(model.state_names):
        fig, axes = plt.subplots(
            1, len(cfg.plot_times), figsize=(3.1 * len(cfg.plot_times), 2.9),
            sharey=True,
        )
        axes = np.atleast_1d(axes)
        for ax, t_req in zip(axes, cfg.plot_times):
            k = int(np.argmin(np.abs(times - t_req)))
            ens = CellEnsemble(float(times[k]), cells[k], model)
            kde = gmdlib.marginalize(reference_kde(ens), [dim])
            coords = cells[k][:, dim]
            pad = 4.0 * float(np.sqrt(kde.covs[0, 0, 0]))
            x = np.linspace(coords.min() - pad, coords.max() + pad, 400)
            ax.plot(x, _gmd_curve(kde, x), "k-", label="reference")
            for est, steps in results.items():
                marg = steps[k]["marginals"].get(name)
                if marg is None:
                    continue
                if est == "charest":
                    g = GMD.from_dict(marg)
                    ax.plot(x, _gmd_curve(g, x), color=_COLORS[est], label=est)
                else:
                    ax.step(
                        marg["centers"],
                        marg["values"],
                        where="mid",
                        color=_COLORS[est],
                        label=est,
                    )
            if snapshots is not None and dim in model.measured_dims:
                mdim = model.measured_dims.index(dim)
                g = GMD.from_dict(snapshots["entries"][k]["gmd"])
                g1 = gmdlib.marginalize(g, [mdim])
                ax.plot(x, _gmd_curve(g1, x), "r--", label="measured")
            ax.set_title(f"t = {times[k]:.2f}")
            ax.set_xlabel(name)
        axes[0].set_ylabel("density")
        axes[-1].legend(fontsize=8)
        fig.tight_layout()
        out = plots_dir / f"density_{name}.svg"
        fig.savefig(out)
        plt.close(fig)
        written.append(out)
    return written


def emit_plots(run_dir: str | Path) -> list[Path]:
    """Render all available curves for a finished run; returns written files."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.yaml"
    if not cfg_path.exists():
        raise NothingToPlot(f"no config.yaml under {run_dir}")
    cfg = ExperimentConfig.from_dict(yaml.safe_load(cfg_path.read_text()))
    plots_dir = run_dir / "plots"
    plots_dir.mkdir(exist_ok=True)
    written = _plot_error_curves(run_dir, plots_dir, cfg.model.state_names)
    written += _plot_density_panels(cfg, run_dir, plots_dir)
    if not written:
        raise NothingToPlot(f"nothing to plot under {run_dir}")
    return written
