"""Smooth cutoff functions with exact plateaus.

The window function mu is 1 on |x| < 1 and 0 on |x| > 2 with C-infinity
ramps in between, built from the classical exp(-1/s) mollifier ratio so
the plateau values are reached exactly (not just to rounding).  The
one-sided steps Kplus / Kminus cover the same ramps from either end and
satisfy mu = (1 - Kplus)(1 - Kminus) pointwise.

Every function takes a `deriv` order up to 4; the ramp derivatives come
from repeatedly differentiating T' = T (1 - T) R with
R(s) = s^-2 + (1-s)^-2, which keeps them closed-form and free of
cancellation near the plateau edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_MAX_DERIV = 4


def _ramp_chain(s):
    """Values of the unit mollifier step and its first four derivatives.

    s is clipped conceptually to the open ramp (0, 1); callers handle the
    plateaus.  Returns an array of shape (5,) + s.shape.
    """
    s = np.asarray(s, dtype=float)
    # exp(-1/s) underflows harmlessly to 0 near the ends of the ramp
    with np.errstate(under='ignore'):
        e0 = np.exp(-1.0 / s)
        e1 = np.exp(-1.0 / (1.0 - s))
        T = e0 / (e0 + e1)
    R = s ** -2.0 + (1.0 - s) ** -2.0
    R1 = -2.0 * s ** -3.0 + 2.0 * (1.0 - s) ** -3.0
    R2 = 6.0 * s ** -4.0 + 6.0 * (1.0 - s) ** -4.0
    R3 = -24.0 * s ** -5.0 + 24.0 * (1.0 - s) ** -5.0
    u1 = T * (1.0 - T) * R
    u2 = u1 * (1.0 - 2.0 * T) * R + T * (1.0 - T) * R1
    u3 = (u2 * (1.0 - 2.0 * T) * R - 2.0 * u1 ** 2 * R
          + 2.0 * u1 * (1.0 - 2.0 * T) * R1 + T * (1.0 - T) * R2)
    u4 = (u3 * (1.0 - 2.0 * T) * R - 6.0 * u1 * u2 * R
          + 3.0 * u2 * (1.0 - 2.0 * T) * R1 - 6.0 * u1 ** 2 * R1
          + 3.0 * u1 * (1.0 - 2.0 * T) * R2 + T * (1.0 - T) * R3)
    return np.stack([T, u1, u2, u3, u4])


def smooth_step(s, deriv: int = 0):
    """C-infinity step: exactly 0 for s <= 0, exactly 1 for s >= 1."""
    if not 0 <= deriv <= _MAX_DERIV:
        raise ConfigError(f"cutoff derivatives available up to order "
                          f"{_MAX_DERIV}, got {deriv}")
    s = np.asarray(s, dtype=float)
    scalar = s.ndim == 0
    x = np.atleast_1d(s)
    out = np.zeros_like(x)
    lo = x <= 0.0
    hi = x >= 1.0
    mid = ~(lo | hi)
    if deriv == 0:
        out[hi] = 1.0
    if mid.any():
        out[mid] = _ramp_chain(x[mid])[deriv]
    return float(out[0]) if scalar else out


def step_up(x, deriv: int = 0):
    """One-sided cutoff rising from 0 on (-inf, 1] to 1 on [2, inf)."""
    return smooth_step(np.asarray(x, dtype=float) - 1.0, deriv)


def step_down(x, deriv: int = 0):
    """One-sided cutoff falling from 1 on (-inf, -2] to 0 on [-1, inf)."""
    val = smooth_step(-np.asarray(x, dtype=float) - 1.0, deriv)
    return val if deriv % 2 == 0 else -np.asarray(val)


def window(x, deriv: int = 0):
    """Even window: exactly 1 on |x| <= 1, exactly 0 on |x| >= 2."""
    if not 0 <= deriv <= _MAX_DERIV:
        raise ConfigError(f"cutoff derivatives available up to order "
                          f"{_MAX_DERIV}, got {deriv}")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    xs = np.atleast_1d(np.abs(x))
    sgn = np.where(np.atleast_1d(x) < 0.0, -1.0, 1.0)
    out = np.asarray(smooth_step(2.0 - xs, deriv), dtype=float)
    if deriv % 2 == 1:
        out = -out * sgn          # chain rule through |x|; flat at x = 0
    return float(out[0]) if scalar else out


def _window_chain(x):
    """window and its first four derivatives in one call, shape (5,)+x.shape."""
    x = np.asarray(x, dtype=float)
    xs = np.atleast_1d(x)
    sgn = np.where(xs < 0.0, -1.0, 1.0)
    out = np.empty((5,) + xs.shape)
    for k in range(5):
        v = np.asarray(smooth_step(2.0 - np.abs(xs), k), dtype=float)
        out[k] = v if k % 2 == 0 else -v * sgn
    return out


@dataclass(frozen=True)
class CutoffConfig:
    """Cutoff geometry of the composite approximation.

    gamma sets the layer-window half-width eps^gamma; the admissible range
    (2/3, 1) is what makes the residual scalings close.  mu / Kplus /
    Kminus expose the window and its one-sided factors with derivatives.
    """
    gamma: float = 0.75

    def __post_init__(self):
        if not (2.0 / 3.0 < self.gamma < 1.0):
            raise ConfigError(f"gamma must lie strictly between 2/3 and 1, "
                              f"got {self.gamma}")

    @staticmethod
    def mu(x, deriv: int = 0):
        return window(x, deriv)

    @staticmethod
    def mu_chain(x):
        return _window_chain(x)

    @staticmethod
    def Kplus(x, deriv: int = 0):
        return step_up(x, deriv)

    @staticmethod
    def Kminus(x, deriv: int = 0):
        return step_down(x, deriv)

    def identity_defect(self, xs) -> float:
        """sup |mu - (1 - Kplus)(1 - Kminus)| on the given points."""
        xs = np.asarray(xs, dtype=float)
        prod = (1.0 - np.asarray(self.Kplus(xs))) \
            * (1.0 - np.asarray(self.Kminus(xs)))
        return float(np.max(np.abs(np.asarray(self.mu(xs)) - prod)))
