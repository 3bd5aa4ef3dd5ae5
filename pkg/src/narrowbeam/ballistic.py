"""Ballistic (zero-diffusion) transport from the boundary ``x^n = 0``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .cloud import WeightedCloud
from .coefficients import CoefficientField, Profile, optical_depth
from .errors import NoExitError
from .geometry import Direction, PhasePoint


def exit_time(p: PhasePoint) -> float:
    """Length of the backward ray from ``p`` to the boundary."""
    th_n = p.theta.components[-1]
    if th_n <= 0.0:
        raise NoExitError("direction is not incoming; the backward ray never meets x^n = 0")
    return float(p.x[-1] / th_n)


def ballistic_eval(g: Callable, lam: CoefficientField, p: PhasePoint, rtol: float = 1e-10) -> float:
    """Attenuated streaming solution ``exp(-int lambda) g(exit point, theta)``.

    ``g(y, theta)`` takes the boundary point ``y`` (length ``n``, last entry 0).
    """
    tau = exit_time(p)
    theta = p.theta.components
    y = p.x - tau * theta
    y[-1] = 0.0
    if tau == 0.0:
        return float(g(y, theta))
    if lam.kind == "constant":
        optical = lam.params["value"] * tau
    else:
        optical, _ = integrate.quad(lambda s: float(lam(p.x - s * theta)), 0.0, tau, epsabs=0.0, epsrel=rtol)
    return math.exp(-optical) * float(g(y, theta))


@dataclass(frozen=True)
class RayMeasureSpec:
    """Delta source at boundary point ``origin`` with direction ``direction``.

    ``lambda_profile`` is the absorption along the ray as a function of path length.
    """

    origin: np.ndarray
    direction: Direction
    lambda_profile: Profile
    dt: float
    t_max: float

    def __post_init__(self):
        d = self.direction if isinstance(self.direction, Direction) else Direction(self.direction)
        object.__setattr__(self, "direction", d)
        origin = np.asarray(self.origin, dtype=float).reshape(-1)
        if origin.size == d.dim - 1:
            origin = np.append(origin, 0.0)
        if origin.size != d.dim or origin[-1] != 0.0:
            raise ValueError("ray origin must be a boundary point")
        object.__setattr__(self, "origin", origin)
        if d.components[-1] <= 0.0:
            raise NoExitError("ray direction must be incoming")
        if not (self.dt > 0.0 and self.t_max > 0.0):
            raise ValueError("dt and t_max must be positive")


def default_ray_step(epsilon: float) -> float:
    return epsilon / 4.0


def ray_measure_sample(spec: RayMeasureSpec) -> WeightedCloud:
    """Midpoint discretization of the ray measure ``exp(-int_0^t lambda) dt delta(x - y - t eta)``.

    Atoms sit at ``t_k = (k + 1/2) dt`` for ``k dt < t_max``; the exact mass
    beyond the last cell is recorded as ``truncation_mass``.
    """
    n_steps = int(math.ceil(spec.t_max / spec.dt - 1e-12))
    t_mid = (np.arange(n_steps) + 0.5) * spec.dt
    eta = spec.direction.components
    weights = np.exp(-optical_depth(spec.lambda_profile, t_mid)) * spec.dt
    x = spec.origin + t_mid[:, None] * eta
    theta = np.broadcast_to(eta, x.shape)
    t_end = n_steps * spec.dt
    lam = spec.lambda_profile
    if lam.kind == "constant" and lam.c0 > 0:
        tail = math.exp(-lam.c0 * t_end) / lam.c0
    else:
        tail, _ = integrate.quad(lambda s: math.exp(-float(optical_depth(lam, s))), t_end, np.inf)
    return WeightedCloud(x, theta, weights, {"truncation_mass": float(tail), "t_end": t_end})


def ray_mass(spec: RayMeasureSpec) -> float:
    """Exact ``int_0^{t_end} exp(-int lambda)`` over the discretized range."""
    n_steps = int(math.ceil(spec.t_max / spec.dt - 1e-12))
    t_end = n_steps * spec.dt
    lam = spec.lambda_profile
    if lam.kind == "constant" and lam.c0 > 0:
        return -math.expm1(-lam.c0 * t_end) / lam.c0
    val, _ = integrate.quad(lambda s: math.exp(-float(optical_depth(lam, s))), 0.0, t_end, epsrel=1e-12)
    return val
