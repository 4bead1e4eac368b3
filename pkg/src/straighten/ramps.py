"""Smooth (C-infinity) transition functions built from exp(-1/x).

All functions are vectorized over numpy arrays and return exact 0 / 1 (or the
exact linear branch) outside their transition windows, which several callers
rely on for bitwise-stationary behaviour.
"""

import numpy as np

# Gauss-Legendre rule on [0, 1] for integrating the smooth step.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def _flat(x):
    x = np.asarray(x, dtype=float)
    pos = x > 0.0
    safe = np.where(pos, x, 1.0)
    return np.where(pos, np.exp(-1.0 / safe), 0.0)


def smooth_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1, monotone in between.

    The maximum slope is 2, attained at x = 1/2.
    """
    x = np.asarray(x, dtype=float)
    a = _flat(x)
    b = _flat(1.0 - x)
    out = a / np.where(a + b > 0.0, a + b, 1.0)
    out = np.where(x <= 0.0, 0.0, out)
    out = np.where(x >= 1.0, 1.0, out)
    return out if out.ndim else float(out)


def smooth_step_integral(y):
    """Integral of :func:`smooth_step` from 0 to ``y`` (0 for y <= 0).

    Uses S(x) + S(1 - x) = 1 so only [0, 1/2] is ever integrated numerically;
    for y >= 1 the result is exactly ``y - 1/2``.
    """
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    out = np.zeros_like(y)

    def _quad(z):
        nodes = z[:, None] * _GL_X[None, :]
        return z * (smooth_step(nodes) @ _GL_W)

    lo = (y > 0.0) & (y <= 0.5)
    if lo.any():
        out[lo] = _quad(y[lo])
    mid = (y > 0.5) & (y < 1.0)
    if mid.any():
        out[mid] = y[mid] - 0.5 + _quad(1.0 - y[mid])
    hi = y >= 1.0
    out[hi] = y[hi] - 0.5
    return float(out[0]) if scalar else out


def smooth_hinge(theta, corner, width):
    """Smoothed ``max(0, theta - corner)`` that never exceeds it.

    Equals ``x smooth_step(x / width)`` with ``x = theta - corner``: exactly 0
    for ``theta <= corner`` and exactly ``theta - corner`` for
    ``theta >= corner + width``.  ``width == 0`` gives the sharp hinge.
    """
    theta = np.asarray(theta, dtype=float)
    x = theta - corner
    if width <= 0.0:
        return np.maximum(0.0, x)
    out = np.where(x > 0.0, x * smooth_step(np.clip(x, 0.0, width) / width), 0.0)
    # the linear branch is computed directly so it is exact
    return np.where(x >= width, x, out)


def phase_out(t, omega):
    """Time bump: 1 for t <= omega, 0 for t >= 2 omega."""
    return 1.0 - smooth_step((np.asarray(t, dtype=float) - omega) / omega)


def phase_out_clock(t, omega):
    """Integral of :func:`phase_out` from 0 to ``t``.

    This is the reparametrized time at which the phased flow samples the
    modified field; it saturates at ``1.5 * omega`` once t >= 2 omega.
    """
    t = np.asarray(t, dtype=float)
    y = (t - omega) / omega
    late = omega + omega * (np.clip(y, 0.0, 1.0) - smooth_step_integral(np.clip(y, 0.0, 1.0)))
    out = np.where(t <= omega, t, late)
    return out if out.ndim else float(out)
