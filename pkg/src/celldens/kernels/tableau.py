"""Dormand-Prince 5(4) embedded pair.

The fifth-order solution is propagated; the weight differences ``E*`` give
the embedded fourth-order error estimate.  Stage 7 evaluates the right-hand
side at the candidate solution (no FSAL reuse; both backends keep the same
seven-evaluation step so their step sequences match).
"""

A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = (
    9017 / 3168,
    -355 / 33,
    46732 / 5247,
    49 / 176,
    -5103 / 18656,
)

B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84

E1 = B1 - 5179 / 57600
E3 = B3 - 7571 / 16695
E4 = B4 - 393 / 640
E5 = B5 + 92097 / 339200
E6 = B6 - 187 / 2100
E7 = -1 / 40
