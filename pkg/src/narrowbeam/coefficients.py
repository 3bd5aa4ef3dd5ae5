"""Coefficient fields, their restriction to rays, and Fermi-Eyges moments.

A :class:`CoefficientField` is a positive scalar field on the closed
half-space (the angular diffusion strength ``sigma`` or the absorption
``lambda``).  Restricting it to a ray ``y + s * eta`` gives a one-dimensional
:class:`Profile`; constant and affine profiles carry closed forms for all
the moments used downstream, other profiles fall back to adaptive quadrature.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import QuadratureFailure
from .geometry import Direction

QUAD_RTOL = 1e-12


class Smoothness(enum.Enum):
    C0 = 0
    C1 = 1
    C2 = 2
    C3 = 3


def _default_check_grid(dim: int) -> np.ndarray:
    axes = [np.linspace(-2.0, 2.0, 5)] * (dim - 1) + [np.linspace(0.0, 4.0, 9)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class CoefficientField:
    """Positive scalar field on ``{x^n >= 0}`` with certified bounds.

    ``evaluator`` must accept arrays of shape ``(..., n)`` and be reentrant.
    ``kind``/``params`` identify the built-in families so that ray
    restrictions keep their closed forms.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    lower_bound: float
    upper_bound: float
    dim: int
    smoothness: Smoothness = Smoothness.C3
    kind: str = "general"
    params: dict = field(default_factory=dict)
    check_points: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (self.lower_bound > 0.0):
            raise ValueError("coefficient lower bound must be positive")
        if self.upper_bound < self.lower_bound:
            raise ValueError("upper bound below lower bound")
        pts = self.check_points
        if pts is None:
            pts = _default_check_grid(self.dim)
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals = np.asarray(self.evaluator(pts), dtype=float)
        slack = 1e-12 * max(1.0, abs(self.lower_bound))
        if np.any(vals < self.lower_bound - slack) or np.any(vals > self.upper_bound * (1 + 1e-12)):
            raise ValueError("coefficient field violates its declared bounds on the check grid")

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(x, dtype=float)), dtype=float)

    @classmethod
    def constant(cls, value: float, dim: int) -> "CoefficientField":
        value = float(value)

        def ev(x):
            return np.full(np.shape(x)[:-1], value)

        return cls(ev, value, value, dim, Smoothness.C3, "constant", {"value": value})

    @classmethod
    def affine(cls, base: float, slope: float, dim: int) -> "CoefficientField":
        """``base + slope * x^n``; nonnegative slope keeps the field bounded below by ``base``."""
        base, slope = float(base), float(slope)
        if slope < 0.0:
            raise ValueError("a negative depth slope is not bounded below on the half-space")

        def ev(x):
            return base + slope * np.asarray(x)[..., -1]

        upper = base if slope == 0.0 else math.inf
        return cls(ev, base, upper, dim, Smoothness.C3, "affine", {"base": base, "slope": slope})

    @classmethod
    def bump(cls, base: float, amplitude: float, center, width: float, dim: int) -> "CoefficientField":
        """``base * (1 + amplitude * exp(-|x - center|^2 / width^2))`` with amplitude > -1."""
        base, amplitude, width = float(base), float(amplitude), float(width)
        center = np.asarray(center, dtype=float).reshape(-1)
        if amplitude <= -1.0 or width <= 0.0 or base <= 0.0 or center.size != dim:
            raise ValueError("invalid bump parameters")

        def ev(x):
            d = np.asarray(x) - center
            return base * (1.0 + amplitude * np.exp(-np.sum(d * d, axis=-1) / width**2))

        lo = base * min(1.0, 1.0 + amplitude)
        hi = base * max(1.0, 1.0 + amplitude)
        params = {"base": base, "amplitude": amplitude, "center": center.tolist(), "width": width}
        return cls(ev, lo, hi, dim, Smoothness.C3, "bump", params)


@dataclass(frozen=True)
class Profile:
    """Coefficient along a ray, as a function of depth ``s >= 0``.

    ``kind`` is ``"constant"`` (value ``c0``), ``"affine"`` (``c0 + c1 s``)
    or ``"general"`` (vectorized callable ``func``).
    """

    kind: str
    c0: float = 0.0
    c1: float = 0.0
    func: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    lower_bound: float = 0.0

    @classmethod
    def constant(cls, value: float) -> "Profile":
        return cls("constant", c0=float(value), lower_bound=float(value))

    @classmethod
    def affine(cls, value0: float, slope: float) -> "Profile":
        if slope == 0.0:
            return cls.constant(value0)
        lower = float(value0) if slope > 0 else -math.inf
        return cls("affine", c0=float(value0), c1=float(slope), lower_bound=lower)

    @classmethod
    def general(cls, func, lower_bound: float = 0.0) -> "Profile":
        return cls("general", func=func, lower_bound=float(lower_bound))

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind == "constant":
            return np.full(s.shape, self.c0)
        if self.kind == "affine":
            return self.c0 + self.c1 * s
        return np.asarray(self.func(s), dtype=float)

    def scaled(self, factor: float) -> "Profile":
        if self.kind == "general":
            f = self.func
            return Profile.general(lambda s: factor * f(s), factor * self.lower_bound)
        return Profile(self.kind, factor * self.c0, factor * self.c1, None, factor * self.lower_bound)

    @property
    def is_polynomial(self) -> bool:
        return self.kind in ("constant", "affine")


def restrict_to_ray(coef: CoefficientField, origin, direction, scale: float = 1.0) -> Profile:
    """Profile ``s -> scale * coef(origin + s * direction)``."""
    origin = np.asarray(origin, dtype=float).reshape(-1)
    eta = np.asarray(direction.components if isinstance(direction, Direction) else direction, dtype=float)
    if origin[-1] < 0.0:
        raise ValueError("ray origin must lie in the closed half-space")
    lower = scale * coef.lower_bound
    if coef.kind == "constant":
        return Profile.constant(scale * coef.params["value"])
    if coef.kind == "affine":
        base, slope = coef.params["base"], coef.params["slope"]
        p = Profile.affine(scale * (base + slope * origin[-1]), scale * slope * eta[-1])
        return Profile(p.kind, p.c0, p.c1, None, lower)

    def func(s):
        s = np.asarray(s, dtype=float)
        pts = origin + s[..., None] * eta
        return scale * coef(pts)

    return Profile.general(func, lower)


def _quad(f, lo: float, hi: float, abs_scale: float = 0.0) -> float:
    """Adaptive Gauss-Kronrod with relative tolerance ``QUAD_RTOL``.

    ``abs_scale`` sets the magnitude the tolerance is relative to for
    integrands that change sign (centered moments).
    """
    if hi == lo:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, lo, hi, epsabs=QUAD_RTOL * abs_scale, epsrel=QUAD_RTOL, limit=400)
        except integrate.IntegrationWarning as exc:
            raise QuadratureFailure(f"quadrature on [{lo}, {hi}] did not converge: {exc}") from exc
    return val


def _poly_power_integral(c0: float, c1: float, k: int, lo, hi, shift=0.0):
    """Closed form of ``int_lo^hi (s - shift)^k (c0 + c1 s) ds``."""
    # rewrite c0 + c1 s = (c0 + c1 shift) + c1 (s - shift)
    d0 = c0 + c1 * shift
    u_lo, u_hi = lo - shift, hi - shift
    return (d0 * (u_hi ** (k + 1) - u_lo ** (k + 1)) / (k + 1)
            + c1 * (u_hi ** (k + 2) - u_lo ** (k + 2)) / (k + 2))


def profile_integral(profile: Profile, k: int, lo: float, hi: float, shift: float = 0.0) -> float:
    """``int_lo^hi (s - shift)^k profile(s) ds``."""
    if profile.is_polynomial:
        return float(_poly_power_integral(profile.c0, profile.c1, k, lo, hi, shift))
    scale = 0.0
    if k > 0:
        reach = max(abs(lo - shift), abs(hi - shift))
        scale = reach**k * abs(_quad(lambda s: float(profile(s)), lo, hi))
    return _quad(lambda s: (s - shift) ** k * float(profile(s)), lo, hi, scale)


@dataclass(frozen=True)
class MomentTriple:
    """Moments ``a, b, c`` of a diffusion profile on ``[t, Xn]`` and ``delta = a c - b^2``."""

    a: float
    b: float
    c: float
    delta: float
    Xn: float
    t: float = 0.0


def fermi_moments(profile: Profile, Xn: float, t: float = 0.0) -> MomentTriple:
    """Weighted integrals ``int_t^Xn s^k profile(s) ds`` for ``k = 0, 1, 2``.

    ``delta`` is computed from moments centered at the interval midpoint,
    which avoids the cancellation in ``a c - b^2`` when ``Xn - t`` is small
    relative to ``t``.
    """
    Xn, t = float(Xn), float(t)
    if not (0.0 <= t <= Xn):
        raise ValueError("fermi_moments needs 0 <= t <= Xn")
    if Xn == t:
        return MomentTriple(0.0, 0.0, 0.0, 0.0, Xn, t)
    mid = 0.5 * (t + Xn)
    m0 = profile_integral(profile, 0, t, Xn)
    m1c = profile_integral(profile, 1, t, Xn, mid)
    m2c = profile_integral(profile, 2, t, Xn, mid)
    a = m0
    b = m1c + mid * m0
    c = m2c + 2.0 * mid * m1c + mid * mid * m0
    delta = max(m0 * m2c - m1c * m1c, 0.0)
    return MomentTriple(a, b, c, delta, Xn, t)


def fermi_moments_array(profile: Profile, depths) -> tuple:
    """Vectorized ``(a, b, c, delta)`` arrays at offset ``t = 0``."""
    depths = np.asarray(depths, dtype=float)
    if profile.is_polynomial:
        X = depths
        mid = 0.5 * X
        m0 = _poly_power_integral(profile.c0, profile.c1, 0, 0.0, X, 0.0)
        m1c = _poly_power_integral(profile.c0, profile.c1, 1, 0.0, X, mid)
        m2c = _poly_power_integral(profile.c0, profile.c1, 2, 0.0, X, mid)
        a = m0
        b = m1c + mid * m0
        c = m2c + 2.0 * mid * m1c + mid * mid * m0
        delta = np.maximum(m0 * m2c - m1c * m1c, 0.0)
        return a, b, c, delta
    out = np.empty((4,) + depths.shape)
    for idx, X in np.ndenumerate(depths):
        m = fermi_moments(profile, X)
        out[(slice(None),) + idx] = (m.a, m.b, m.c, m.delta)
    return out[0], out[1], out[2], out[3]


@dataclass(frozen=True)
class AttenuationValue:
    value: float
    from_t: float
    to_t: float


def attenuation(profile_lambda: Profile, from_t: float, to_t: float) -> AttenuationValue:
    """``exp(-int_from^to lambda(s) ds)``."""
    if not (0.0 <= from_t <= to_t):
        raise ValueError("attenuation needs 0 <= from_t <= to_t")
    return AttenuationValue(math.exp(-profile_integral(profile_lambda, 0, from_t, to_t)), from_t, to_t)


def optical_depth(profile_lambda: Profile, depths) -> np.ndarray:
    """Vectorized ``int_0^s lambda`` for an array of depths ``s``."""
    depths = np.asarray(depths, dtype=float)
    if profile_lambda.is_polynomial:
        return profile_lambda.c0 * depths + 0.5 * profile_lambda.c1 * depths**2
    flat = depths.ravel()
    order = np.argsort(flat)
    out = np.empty_like(flat)
    acc, prev = 0.0, 0.0
    for i in order:
        acc += profile_integral(profile_lambda, 0, prev, flat[i])
        prev = flat[i]
        out[i] = acc
    return out.reshape(depths.shape)


@dataclass(frozen=True)
class LineMoment:
    """Value of ``int |t|^k exp(-alpha t^2 + 2 beta t) dt`` or an upper bound of it."""

    value: float
    k: int
    is_bound: bool

    def __float__(self):
        return self.value


def gaussian_line_moment(k: int, alpha: float, beta: float) -> LineMoment:
    """Closed form for ``k = 0, 2``; erf-free majorant for ``k = 1, 3``."""
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    ratio = beta * beta / alpha
    root = math.sqrt(math.pi / alpha)
    growth = math.exp(ratio)
    if k == 0:
        return LineMoment(root * growth, 0, False)
    if k == 1:
        return LineMoment((1.0 + abs(beta) * root * growth) / alpha, 1, True)
    if k == 2:
        return LineMoment(math.sqrt(math.pi) * (2 * alpha + 4 * beta**2) / (4 * alpha**2.5) * growth, 2, False)
    if k == 3:
        val = (1.0 + ratio + (2.0 * ratio + 3.0) * 0.5 * abs(beta) * root * growth) / alpha**2
        return LineMoment(val, 3, True)
    raise ValueError("gaussian_line_moment supports k in 0..3")
