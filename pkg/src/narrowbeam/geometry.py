"""Half-space phase-space geometry.

Points of phase space are pairs ``(x, theta)`` with ``x`` in the closed upper
half-space ``{x^n >= 0}`` and ``theta`` on the unit sphere ``S^{n-1}``.  The
sphere is charted by stereographic projection from the south pole
``S = (0, ..., 0, -1)``; pencil-beam quantities live in stretched coordinates

    x' = y' + 2 eps X',   x^n = X^n,   theta = J(eps V).

All functions are vectorized over leading axes: a direction array has shape
``(..., n)`` and a chart array shape ``(..., n - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import SouthPoleError

SOUTH_POLE_TOL = 1e-12
UNIT_NORM_TOL = 1e-12


def normalize(theta):
    """Return ``theta / |theta|`` along the last axis."""
    theta = np.asarray(theta, dtype=float)
    norm = np.linalg.norm(theta, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize the zero vector")
    return theta / norm


def north_pole(n: int) -> np.ndarray:
    pole = np.zeros(n)
    pole[-1] = 1.0
    return pole


@dataclass(frozen=True)
class Direction:
    """A unit vector on ``S^{n-1}``, renormalized on construction."""

    components: np.ndarray

    def __post_init__(self):
        comp = normalize(np.asarray(self.components, dtype=float).reshape(-1))
        if comp.size < 2:
            raise ValueError("directions need dimension n >= 2")
        object.__setattr__(self, "components", comp)

    @property
    def dim(self) -> int:
        return self.components.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.components, dtype=dtype)


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    theta: Direction

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        theta = self.theta if isinstance(self.theta, Direction) else Direction(self.theta)
        if x.size != theta.dim:
            raise ValueError("position and direction dimensions differ")
        if x[-1] < 0.0:
            raise ValueError("phase points must lie in the closed half-space x^n >= 0")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "theta", theta)


@dataclass(frozen=True)
class StretchedPoint:
    Xp: np.ndarray
    Xn: float
    V: np.ndarray

    def __post_init__(self):
        if self.Xn < 0.0:
            raise ValueError("stretched depth must be nonnegative")
        object.__setattr__(self, "Xp", np.asarray(self.Xp, dtype=float).reshape(-1))
        object.__setattr__(self, "V", np.asarray(self.V, dtype=float).reshape(-1))


@dataclass(frozen=True)
class StretchFrame:
    """Scale ``epsilon`` and boundary anchor ``y'`` of the stretched map."""

    epsilon: float
    dim: int
    anchor: np.ndarray = field(default=None)

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.dim < 2:
            raise ValueError("dimension must be at least 2")
        anchor = np.zeros(self.dim - 1) if self.anchor is None else np.asarray(self.anchor, dtype=float).reshape(-1)
        if anchor.size != self.dim - 1:
            raise ValueError("anchor must have n - 1 components")
        object.__setattr__(self, "anchor", anchor)


def stereo_project(theta) -> np.ndarray:
    """Stereographic projection from the south pole, ``theta' / (1 + theta_n)``."""
    theta = np.asarray(theta, dtype=float)
    denom = 1.0 + theta[..., -1]
    if np.any(denom <= SOUTH_POLE_TOL):
        raise SouthPoleError("direction is at the south pole; stereographic chart undefined")
    return theta[..., :-1] / denom[..., None]


def stereo_lift(v) -> np.ndarray:
    """Inverse chart ``J(v) = (2v, 1 - |v|^2) / (1 + |v|^2)``."""
    v = np.asarray(v, dtype=float)
    r2 = np.sum(v * v, axis=-1, keepdims=True)
    bracket = 1.0 + r2
    return np.concatenate([2.0 * v / bracket, (1.0 - r2) / bracket], axis=-1)


def conformal_factor(v) -> np.ndarray:
    """Conformal factor ``c(v) = 2 / (1 + |v|^2)`` of the round metric in the chart."""
    v = np.asarray(v, dtype=float)
    return 2.0 / (1.0 + np.sum(v * v, axis=-1))


def to_stretched(frame: StretchFrame, x, theta):
    """Map macroscopic ``(x, theta)`` arrays to stretched ``(X', X^n, V)``."""
    x = np.asarray(x, dtype=float)
    Xp = (x[..., :-1] - frame.anchor) / (2.0 * frame.epsilon)
    V = stereo_project(theta) / frame.epsilon
    return Xp, x[..., -1].copy(), V


def from_stretched(frame: StretchFrame, Xp, Xn, V):
    """Inverse of :func:`to_stretched`; returns ``(x, theta)`` arrays."""
    Xp = np.asarray(Xp, dtype=float)
    Xn = np.asarray(Xn, dtype=float)
    x = np.concatenate([frame.anchor + 2.0 * frame.epsilon * Xp, Xn[..., None]], axis=-1)
    return x, stereo_lift(frame.epsilon * np.asarray(V, dtype=float))


def phase_distance(x1, theta1, x2, theta2) -> np.ndarray:
    """Product metric: Euclidean in position, chordal on the sphere, l2-combined."""
    dx = np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)
    dth = np.asarray(theta1, dtype=float) - np.asarray(theta2, dtype=float)
    return np.sqrt(np.sum(dx * dx, axis=-1) + np.sum(dth * dth, axis=-1))


def pairwise_phase_distance(x, theta, x2=None, theta2=None) -> np.ndarray:
    """Dense ``(N, M)`` matrix of phase distances; ``M = N`` when only one set is given."""
    p = np.concatenate([np.asarray(x, dtype=float), np.asarray(theta, dtype=float)], axis=-1)
    if x2 is None:
        return cdist(p, p)
    q = np.concatenate([np.asarray(x2, dtype=float), np.asarray(theta2, dtype=float)], axis=-1)
    return cdist(p, q)
