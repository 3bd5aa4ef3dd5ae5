"""Fermi pencil beams in stretched coordinates.

For a delta boundary source at ``(X', V) = (0, Theta)`` the pencil beam at
depth ``Xn`` is an attenuated Gaussian in the sheared variables
``(X' - Xn V, V - Theta)``.  Per transverse dimension the unsheared Gaussian
has covariance ``2 [[c, -b], [-b, a]]`` where ``a, b, c`` are the depth
moments of the rescaled diffusion profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy import integrate

from .cloud import WeightedCloud
from .coefficients import (
    CoefficientField,
    MomentTriple,
    Profile,
    fermi_moments,
    fermi_moments_array,
    optical_depth,
    profile_integral,
    restrict_to_ray,
)
from .errors import DegenerateDepthError, NonConvergent, SourceSupportError
from .geometry import Direction, StretchFrame, StretchedPoint, from_stretched, north_pole, stereo_project
from .rng import block_generator, blocks

DELTA_FLOOR = 1e-300
DEFAULT_CONE_CONSTANT = 10.0


@dataclass(frozen=True)
class KernelParams:
    """Quadratic form ``alpha |X|^2 + 2 beta X.V + gamma |V|^2`` of a normalized Gaussian kernel."""

    alpha: float
    beta: float
    gamma: float
    delta: float
    dim: int

    def __post_init__(self):
        if not (self.alpha > 0 and self.gamma > 0 and self.delta > 0):
            raise ValueError("kernel parameters must have alpha, gamma, delta > 0")
        if not math.isclose(self.alpha * self.gamma - self.beta**2, 1.0 / (16.0 * self.delta), rel_tol=1e-6):
            raise ValueError("alpha*gamma - beta^2 must equal 1/(16 delta)")


def kernel_params(m: MomentTriple, dim: int) -> KernelParams:
    if not (m.delta > DELTA_FLOOR):
        raise DegenerateDepthError(f"moment determinant {m.delta} too small at depth {m.Xn}")
    scale = 1.0 / (4.0 * m.delta)
    return KernelParams(m.a * scale, m.b * scale, m.c * scale, m.delta, dim)


def h_kernel_eval(params: KernelParams, Xp, V) -> np.ndarray:
    """Kernel value at ``(X', V)``; arrays of shape ``(..., n-1)``."""
    Xp = np.asarray(Xp, dtype=float)
    V = np.asarray(V, dtype=float)
    quad = (params.alpha * np.sum(Xp * Xp, axis=-1) + 2.0 * params.beta * np.sum(Xp * V, axis=-1)
            + params.gamma * np.sum(V * V, axis=-1))
    norm = (4.0 * math.pi * math.sqrt(params.delta)) ** (params.dim - 1)
    return np.exp(-quad) / norm


def sum_moments(first: MomentTriple, second: MomentTriple) -> MomentTriple:
    """Moments of the convolution of two kernels: covariances add."""
    a = first.a + second.a
    b = first.b + second.b
    c = first.c + second.c
    return MomentTriple(a, b, c, a * c - b * b, max(first.Xn, second.Xn), 0.0)


def convolved_kernel_params(sigma_profile: Profile, Xn: float, t: float, dim: int) -> KernelParams:
    """Kernel of the convolution of the depth-``t`` beam kernel with the ``[t, Xn]`` propagation kernel."""
    return kernel_params(sum_moments(fermi_moments(sigma_profile, t), fermi_moments(sigma_profile, Xn, t)), dim)


@dataclass(frozen=True)
class GaussianCovariance:
    """Per-transverse-dimension second moments and the mean vectors of ``(X', V)``."""

    var_X: float
    var_V: float
    cov_XV: float
    mean_X: np.ndarray
    mean_V: np.ndarray

    @property
    def determinant(self) -> float:
        return self.var_X * self.var_V - self.cov_XV**2


@dataclass(frozen=True)
class PencilBeamSpec:
    """Delta-sourced pencil beam: frame, incoming direction and profiles along its ray.

    ``sigma_profile`` is the rescaled profile (one quarter of ``sigma``).
    """

    frame: StretchFrame
    source_dir: Direction
    sigma_profile: Profile
    lambda_profile: Profile
    cone_constant: float = DEFAULT_CONE_CONSTANT

    def __post_init__(self):
        d = self.source_dir if isinstance(self.source_dir, Direction) else Direction(self.source_dir)
        object.__setattr__(self, "source_dir", d)
        if d.dim != self.frame.dim:
            raise ValueError("source direction dimension differs from frame dimension")
        gap = float(np.linalg.norm(north_pole(d.dim) - d.components))
        if gap > self.cone_constant * self.frame.epsilon**2 * (1 + 1e-12):
            raise SourceSupportError(
                f"|N - eta| = {gap:.3e} exceeds {self.cone_constant} * eps^2 = {self.cone_constant * self.frame.epsilon**2:.3e}")

    @property
    def dim(self) -> int:
        return self.frame.dim

    @property
    def Theta(self) -> np.ndarray:
        return stereo_project(self.source_dir.components) / self.frame.epsilon

    @classmethod
    def from_fields(cls, frame: StretchFrame, direction, sigma: CoefficientField, lam: CoefficientField,
                    cone_constant: float = DEFAULT_CONE_CONSTANT) -> "PencilBeamSpec":
        direction = direction if isinstance(direction, Direction) else Direction(direction)
        origin = np.concatenate([frame.anchor, [0.0]])
        return cls(frame, direction, restrict_to_ray(sigma, origin, direction, 0.25),
                   restrict_to_ray(lam, origin, direction, 1.0), cone_constant)


def _attenuation_array(spec: PencilBeamSpec, depths) -> np.ndarray:
    return np.exp(-optical_depth(spec.lambda_profile, depths))


def pencil_eval(spec: PencilBeamSpec, s, Xn=None, V=None):
    """Beam density ``eta(Xn) H1(X' - Xn V, V - Theta)``.

    Call with a :class:`StretchedPoint`, or with arrays ``(Xp, Xn, V)``.
    """
    if isinstance(s, StretchedPoint):
        Xp, Xn, V = s.Xp, s.Xn, s.V
    else:
        Xp = s
    Xp = np.asarray(Xp, dtype=float)
    V = np.asarray(V, dtype=float)
    Xn = np.asarray(Xn, dtype=float)
    if np.any(Xn <= 0.0):
        raise DegenerateDepthError("pencil beam is a delta at depth 0")
    a, b, c, delta = fermi_moments_array(spec.sigma_profile, Xn)
    if np.any(delta <= DELTA_FLOOR):
        raise DegenerateDepthError("moment determinant vanishes")
    Y = Xp - Xn[..., None] * V
    W = V - spec.Theta
    quad = (a * np.sum(Y * Y, axis=-1) + 2.0 * b * np.sum(Y * W, axis=-1) + c * np.sum(W * W, axis=-1)) / (4.0 * delta)
    norm = (4.0 * math.pi * np.sqrt(delta)) ** (spec.dim - 1)
    out = _attenuation_array(spec, Xn) * np.exp(-quad) / norm
    return float(out) if out.ndim == 0 else out


def pencil_cov(spec: PencilBeamSpec, Xn: float) -> GaussianCovariance:
    if Xn <= 0.0:
        raise DegenerateDepthError("pencil beam covariance undefined at depth 0")
    m = fermi_moments(spec.sigma_profile, Xn)
    if m.delta <= DELTA_FLOOR:
        raise DegenerateDepthError("moment determinant vanishes")
    theta = spec.Theta
    var_X = 2.0 * m.c + 2.0 * Xn * Xn * m.a - 4.0 * Xn * m.b
    cov = -2.0 * m.b + 2.0 * Xn * m.a
    return GaussianCovariance(var_X, 2.0 * m.a, cov, Xn * theta, theta.copy())


def _gauss_hermite(n: int):
    """Nodes and weights for expectations against a standard normal."""
    z, w = np.polynomial.hermite_e.hermegauss(n)
    return z, w / math.sqrt(2.0 * math.pi)


def _tensor_normal_rule(n_nodes: int, dims: int):
    z, w = _gauss_hermite(n_nodes)
    grids = np.meshgrid(*([z] * dims), indexing="ij")
    weights = np.ones_like(grids[0]) if dims else np.ones(())
    for g in np.meshgrid(*([w] * dims), indexing="ij"):
        weights = weights * g
    return np.stack([g.ravel() for g in grids], axis=-1), weights.ravel()


def _pair_cholesky(var_x, cov, var_v):
    """Lower Cholesky factor entries of ``[[var_x, cov], [cov, var_v]]`` allowing degeneracy."""
    l11 = math.sqrt(max(var_x, 0.0))
    l21 = cov / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(var_v - l21 * l21, 0.0))
    return l11, l21, l22


def forward_solve_eval(spec: PencilBeamSpec, source: Optional[Callable], s: StretchedPoint,
                       n_gh: int = 16, t_rtol: float = 1e-8) -> float:
    """Pencil beam with delta boundary source plus an interior source ``F(Xp, Xn, V)``.

    The interior term at depth ``t`` convolves ``F(. + t V, t, V)`` with the
    ``[t, Xn]`` kernel; the convolution is a Gaussian expectation done by
    tensor Gauss-Hermite and the ``t`` integral by adaptive quadrature.
    """
    boundary = pencil_eval(spec, s)
    if source is None:
        return boundary
    k = spec.dim - 1
    nodes, weights = _tensor_normal_rule(n_gh, 2 * k)
    zx, zv = nodes[:, :k], nodes[:, k:]
    Xn = float(s.Xn)
    Y = s.Xp - Xn * s.V
    tau_total = float(optical_depth(spec.lambda_profile, Xn))

    def inner(t):
        m = fermi_moments(spec.sigma_profile, Xn, t)
        l11, l21, l22 = _pair_cholesky(2.0 * m.c, -2.0 * m.b, 2.0 * m.a)
        gx = l11 * zx
        gv = l21 * zx + l22 * zv
        Z = Y - gx
        Wv = s.V - gv
        vals = np.asarray(source(Z + t * Wv, np.full(len(weights), t), Wv), dtype=float)
        survive = math.exp(-(tau_total - float(optical_depth(spec.lambda_profile, t))))
        return survive * float(np.dot(weights, vals))

    interior, _ = integrate.quad(inner, 0.0, Xn, epsabs=1e-14, epsrel=t_rtol, limit=200)
    return boundary + interior


def backward_moments(sigma_profile: Profile, Xn: float, t: float):
    """Second moments ``(var_X, cov_XV, var_V)`` of the displacement accumulated on ``[Xn, t]``."""
    A = profile_integral(sigma_profile, 0, Xn, t)
    B = -profile_integral(sigma_profile, 1, Xn, t, shift=t)
    C = profile_integral(sigma_profile, 2, Xn, t, shift=t)
    return 2.0 * C, 2.0 * B, 2.0 * A


def backward_eval(spec: PencilBeamSpec, psi: Callable, s: StretchedPoint, depth_support: Sequence[float],
                  n_gh: int = 24, n_depth: int = 64) -> float:
    """Solution ``W`` of the backward pencil-beam problem with right-hand side ``psi``.

    ``psi(Xp, Xn, V)`` must vanish for depths outside ``depth_support``.
    ``W(X', Xn, V)`` averages ``psi`` along the forward Gaussian process started
    at ``(X', Xn, V)`` with the attenuation as a weight.
    """
    t_lo, t_hi = float(depth_support[0]), float(depth_support[1])
    Xn = float(s.Xn)
    lo = max(Xn, t_lo)
    if lo >= t_hi:
        return 0.0
    k = spec.dim - 1
    nodes, weights = _tensor_normal_rule(n_gh, 2 * k)
    zx, zv = nodes[:, :k], nodes[:, k:]
    tg, tw = np.polynomial.legendre.leggauss(8)
    panels = max(1, n_depth // 8)
    edges = np.linspace(lo, t_hi, panels + 1)
    tau0 = float(optical_depth(spec.lambda_profile, Xn))
    Xp = np.asarray(s.Xp, dtype=float)
    V = np.asarray(s.V, dtype=float)
    total = 0.0
    for p0, p1 in zip(edges[:-1], edges[1:]):
        half = 0.5 * (p1 - p0)
        for node, wt in zip(tg, tw):
            t = p0 + half * (node + 1.0)
            var_x, cov, var_v = backward_moments(spec.sigma_profile, Xn, t)
            l11, l21, l22 = _pair_cholesky(var_x, cov, var_v)
            dx = l11 * zx
            dv = l21 * zx + l22 * zv
            vals = np.asarray(psi(Xp + (t - Xn) * V + dx, np.full(len(weights), t), V + dv), dtype=float)
            survive = math.exp(-(float(optical_depth(spec.lambda_profile, t)) - tau0))
            total += half * wt * survive * float(np.dot(weights, vals))
    return total


# ---------------------------------------------------------------- sampling

def _invert_optical_depth(profile: Profile, targets: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Depths ``s`` with ``int_0^s lambda = targets`` inside ``[lo, hi]``."""
    if profile.kind == "constant":
        if profile.c0 == 0.0:
            raise ValueError("zero attenuation has no optical-depth inverse")
        return targets / profile.c0
    if profile.kind == "affine":
        c0, c1 = profile.c0, profile.c1
        # c1/2 s^2 + c0 s - target = 0, stable root
        disc = np.sqrt(c0 * c0 + 2.0 * c1 * targets)
        return 2.0 * targets / (c0 + disc)
    table = np.linspace(lo, hi, 8193)
    tau = optical_depth(profile, table)
    return np.interp(targets, tau, table)


def _allocate(masses: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder allocation of ``n`` samples proportional to ``masses``."""
    share = masses / masses.sum() * n
    counts = np.floor(share).astype(np.int64)
    rest = n - counts.sum()
    if rest > 0:
        order = np.argsort(-(share - counts), kind="stable")
        counts[order[:rest]] += 1
    return counts


def _depth_cell_masses(spec: PencilBeamSpec, edges: np.ndarray):
    tau = optical_depth(spec.lambda_profile, edges)
    lam = spec.lambda_profile
    if lam.kind == "constant" and lam.c0 > 0:
        masses = (np.exp(-tau[:-1]) - np.exp(-tau[1:])) / lam.c0
    else:
        masses = np.array([integrate.quad(lambda s: math.exp(-float(optical_depth(lam, s))), a, b,
                                          epsabs=0.0, epsrel=1e-12)[0] for a, b in zip(edges[:-1], edges[1:])])
    return tau, masses


def beam_tail_mass(spec: PencilBeamSpec, depth: float) -> float:
    """``int_depth^inf eta``: the beam mass beyond a truncation depth."""
    lam = spec.lambda_profile
    tau = float(optical_depth(lam, depth))
    if lam.kind == "constant":
        return math.exp(-tau) / lam.c0 if lam.c0 > 0 else math.inf
    val, _ = integrate.quad(lambda s: math.exp(-float(optical_depth(lam, s)) + tau), depth, np.inf, epsrel=1e-10)
    return math.exp(-tau) * val


def sample_stretched(spec: PencilBeamSpec, depths: np.ndarray, normals: np.ndarray):
    """Exact beam draws ``(Xp, V)`` at the given depths from standard normals of shape ``(N, 2(n-1))``."""
    depths = np.asarray(depths, dtype=float)
    k = spec.dim - 1
    a, b, c, delta = fermi_moments_array(spec.sigma_profile, depths)
    if np.any(delta <= DELTA_FLOOR):
        raise DegenerateDepthError("cannot sample a beam at zero depth")
    z1, z2 = normals[:, :k], normals[:, k:]
    gv = np.sqrt(2.0 * a)[:, None] * z1
    gx = (-b * np.sqrt(2.0 / a))[:, None] * z1 + np.sqrt(2.0 * delta / a)[:, None] * z2
    V = spec.Theta + gv
    Xp = gx + depths[:, None] * V
    return Xp, V


def pencil_sample(spec: PencilBeamSpec, n_samples: int, depth_grid, rng_seed: int, stream: int = 0,
                  conformal_weight: bool = True, depth_mode: str = "stratified") -> WeightedCloud:
    """Weighted cloud approximating the macroscopic pencil-beam measure.

    ``depth_mode="stratified"`` splits samples between the grid cells in
    proportion to the exact cell mass ``int eta`` and draws depths inside a
    cell with density proportional to ``eta``; ``"nodes"`` puts samples on the
    grid nodes with trapezoidal weights.  With ``conformal_weight`` each atom
    carries the Jacobian ``(c(eps V)/2)^(n-1)`` of the stereographic chart, so
    the cloud represents the beam as a measure in ``(x, theta)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    edges = np.asarray(depth_grid, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0) or edges[0] < 0:
        raise ValueError("depth grid must be increasing, nonnegative, with at least two nodes")
    k = spec.dim - 1
    tau, masses = _depth_cell_masses(spec, edges)
    if depth_mode == "stratified":
        counts = _allocate(masses, n_samples)
        cell = np.repeat(np.arange(masses.size), counts)
        per_weight = np.where(counts > 0, masses / np.maximum(counts, 1), 0.0)[cell]
        lost = float(masses[counts == 0].sum())
    elif depth_mode == "nodes":
        eta = np.exp(-tau)
        dz = np.diff(edges)
        node_w = np.zeros(edges.size)
        node_w[:-1] += 0.5 * dz
        node_w[1:] += 0.5 * dz
        node_w = node_w * eta
        if edges[0] == 0.0:
            node_w[0] = 0.0
            node_w[1] += 0.5 * dz[0] * eta[0]
        counts = _allocate(node_w, n_samples)
        cell = np.repeat(np.arange(edges.size), counts)
        per_weight = np.where(counts > 0, node_w / np.maximum(counts, 1), 0.0)[cell]
        lost = float(node_w[counts == 0].sum())
    else:
        raise ValueError(f"unknown depth mode {depth_mode!r}")

    n = cell.size
    depth = np.empty(n)
    normals = np.empty((n, 2 * k))
    for blk, start, stop in blocks(n):
        gen = block_generator(rng_seed, stream, blk)
        u = gen.random(stop - start)
        normals[start:stop] = gen.standard_normal((stop - start, 2 * k))
        cs = cell[start:stop]
        if depth_mode == "stratified":
            jump = tau[cs + 1] - tau[cs]
            target = tau[cs] - np.log1p(-u * -np.expm1(-jump))
            d = _invert_optical_depth(spec.lambda_profile, target, edges[0], edges[-1])
            depth[start:stop] = np.clip(d, edges[cs], edges[cs + 1])
        else:
            depth[start:stop] = edges[cs]
    depth = np.maximum(depth, 1e-300)
    Xp, V = sample_stretched(spec, depth, normals)
    x, theta = from_stretched(spec.frame, Xp, depth, V)
    w = per_weight.copy()
    if conformal_weight:
        eps = spec.frame.epsilon
        w *= (1.0 + eps * eps * np.sum(V * V, axis=-1)) ** (-k)
    diag = {"truncation_mass": beam_tail_mass(spec, edges[-1]) + lost,
            "beam_mass": float(masses.sum()), "n_samples": int(n)}
    return WeightedCloud(x, theta, w, diag)


def default_depth_grid(spec: PencilBeamSpec, n_cells: int = 2048, tail_fraction: float = 1e-6) -> np.ndarray:
    """Uniform grid from 0 to the depth where the beam tail mass falls below ``tail_fraction``."""
    hi = 1.0
    total = beam_tail_mass(spec, 0.0)
    while beam_tail_mass(spec, hi) > tail_fraction * total:
        hi *= 1.5
    return np.linspace(0.0, hi, n_cells + 1)


@dataclass(frozen=True)
class SourceAtom:
    """Boundary point ``y'`` with incoming direction ``eta`` and weight ``g``."""

    anchor: np.ndarray
    direction: Direction
    weight: float


def superpose_sample(atoms: Sequence[SourceAtom], epsilon: float, n_samples: int, rng_seed: int,
                     sigma: CoefficientField, lam: CoefficientField, depth_grid=None,
                     cone_constant: float = DEFAULT_CONE_CONSTANT, conformal_weight: bool = True) -> WeightedCloud:
    """Superposition of pencil beams for a weighted list of boundary atoms.

    Samples are split between atoms in proportion to their weights (a
    stratified mixture draw); each sub-cloud is a :func:`pencil_sample` for
    the frame anchored at the atom, scaled by the atom's weight.
    """
    atoms = list(atoms)
    if not atoms:
        raise ValueError("no source atoms")
    g = np.array([a.weight for a in atoms], dtype=float)
    if np.any(g < 0) or g.sum() <= 0:
        raise ValueError("source weights must be nonnegative with positive total")
    dim = atoms[0].direction.dim
    specs = []
    for a in atoms:
        frame = StretchFrame(epsilon, dim, a.anchor)
        specs.append(PencilBeamSpec.from_fields(frame, a.direction, sigma, lam, cone_constant))
    counts = _allocate(g, n_samples)
    parts = []
    for idx, (spec, cnt, weight) in enumerate(zip(specs, counts, g)):
        if cnt == 0 or weight == 0:
            continue
        grid = default_depth_grid(spec) if depth_grid is None else depth_grid
        sub = pencil_sample(spec, int(cnt), grid, rng_seed, stream=idx, conformal_weight=conformal_weight)
        sub.diagnostics["truncation_mass"] *= weight
        sub.diagnostics["beam_mass"] *= weight
        parts.append(sub.scaled(weight))
    return WeightedCloud.concatenate(parts)


# ---------------------------------------------------------------- moment integrals

def _poly_mul_linear(coefs: np.ndarray, cy: float, cw: float) -> np.ndarray:
    """Multiply a bivariate polynomial (coefficient array in Y, W) by ``cy Y + cw W``."""
    out = np.zeros((coefs.shape[0] + 1, coefs.shape[1] + 1))
    out[1:, :-1] += cy * coefs
    out[:-1, 1:] += cw * coefs
    return out


def _derivative_polynomial(px: int, qv: int, alpha: float, beta: float, gamma: float, Xn: float) -> np.ndarray:
    """Polynomial ``P`` with ``dY^px (dW - Xn dY)^qv h = P h`` for the Gaussian ``h = exp(-Q)``.

    ``Q = alpha Y^2 + 2 beta Y W + gamma W^2``; the sheared ``V`` derivative
    becomes ``dW - Xn dY`` after the change of variables ``Y = X' - Xn V``.
    """
    P = np.ones((1, 1))

    def apply(P, which):
        if which == "Y":
            dP = npoly.polyder(P, axis=0) if P.shape[0] > 1 else np.zeros((1, P.shape[1]))
            lin = _poly_mul_linear(P, -2 * alpha, -2 * beta)
        else:
            dP = npoly.polyder(P, axis=1) if P.shape[1] > 1 else np.zeros((P.shape[0], 1))
            lin = _poly_mul_linear(P, -2 * beta, -2 * gamma)
        out = lin.copy()
        out[:dP.shape[0], :dP.shape[1]] += dP
        return out

    for _ in range(px):
        P = apply(P, "Y")
    for _ in range(qv):
        PW = apply(P, "W")
        PY = apply(P, "Y")
        shape = (max(PW.shape[0], PY.shape[0]), max(PW.shape[1], PY.shape[1]))
        out = np.zeros(shape)
        out[:PW.shape[0], :PW.shape[1]] += PW
        out[:PY.shape[0], :PY.shape[1]] -= Xn * PY
        P = out
    return P


def _as_multi(index, k: int) -> tuple:
    if np.isscalar(index):
        arr = [0] * k
        arr[0] = int(index)
        return tuple(arr)
    index = tuple(int(v) for v in index)
    if len(index) != k:
        raise ValueError("multi-index length must equal n - 1")
    return index


def _transverse_factor(a, b, c, delta, Xn, px, qv, l_pow, m_pow, theta_j, z1, z2, wz):
    """``int |(Y + Xn W)^l (W + theta)^m P(Y, W)| h dY dW`` in whitened coordinates, vectorized over depth."""
    out = np.empty(Xn.size)
    for idx in range(Xn.size):
        s4 = 4.0 * delta[idx]
        al, be, ga = a[idx] / s4, b[idx] / s4, c[idx] / s4
        l11 = math.sqrt(2.0 * c[idx])
        l21 = -2.0 * b[idx] / l11
        l22 = math.sqrt(2.0 * delta[idx] / c[idx])
        Y = l11 * z1
        W = l21 * z1 + l22 * z2
        vals = np.ones_like(Y)
        if px or qv:
            vals = npoly.polyval2d(Y, W, _derivative_polynomial(px, qv, al, be, ga, Xn[idx]))
        if l_pow:
            vals = vals * (Y + Xn[idx] * W) ** l_pow
        if m_pow:
            vals = vals * (W + theta_j) ** m_pow
        out[idx] = np.sum(np.abs(vals) * wz)
    return out


def _depth_rule(spec: PencilBeamSpec, x_min: float, log_step: float, panels: int):
    """Graded depth nodes: log-uniform below 1, Gauss-Legendre panels up to the attenuation cutoff."""
    u = np.arange(math.log(x_min), 0.0 + 1e-12, log_step)
    if u[-1] < 0.0:
        u = np.append(u, 0.0)
    nu = u.size
    # composite trapezoid in the log variable
    wu = np.full(nu, 0.0)
    du = np.diff(u)
    wu[:-1] += 0.5 * du
    wu[1:] += 0.5 * du
    x_lo = np.exp(u)
    w_lo = wu * x_lo
    hi = 1.0
    while float(optical_depth(spec.lambda_profile, hi)) < 46.0:
        hi *= 1.5
    g, gw = np.polynomial.legendre.leggauss(10)
    edges = np.linspace(1.0, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    x_hi = (edges[:-1, None] + half[:, None] * (g[None, :] + 1.0)).ravel()
    w_hi = (half[:, None] * gw[None, :]).ravel()
    return np.concatenate([x_lo, x_hi]), np.concatenate([w_lo, w_hi])


def moment_integral(spec: PencilBeamSpec, l: int, m: int, p, q, i: int = 0, j: int = 0,
                    rel_tol: float = 0.01, levels: int = 3, return_levels: bool = False):
    """Weighted L1 norm of derivatives of the beam over the whole half-space.

    Integrand ``|X^i - Xn Theta^i|^l |V^j|^m |d_X'^p d_V^q U|`` for the
    delta-sourced beam of ``spec``.  Derivatives of the Gaussian are exact
    (polynomial times kernel), the ``(X', V)`` integral is a trapezoid rule in
    whitened coordinates and the depth integral uses a graded mesh whose
    inner cutoff and spacing shrink with each level.  Raises
    :class:`NonConvergent` if the last two levels differ by more than
    ``rel_tol``.
    """
    k = spec.dim - 1
    p, q = _as_multi(p, k), _as_multi(q, k)
    if not (0 <= i < k and 0 <= j < k):
        raise ValueError("component indices out of range")
    theta = spec.Theta
    active = sorted(set([i, j]) | {d for d in range(k) if p[d] or q[d]})
    values = []
    for level in range(levels):
        x_min = 10.0 ** (-4 - 2 * level)
        log_step = 0.25 / 2**level
        depths, dweights = _depth_rule(spec, x_min, log_step, 8 * 2**level)
        a, b, c, delta = fermi_moments_array(spec.sigma_profile, depths)
        eta = np.exp(-optical_depth(spec.lambda_profile, depths))
        npts = 141
        zz = np.linspace(-9.0, 9.0, npts)
        h = zz[1] - zz[0]
        z1, z2 = np.meshgrid(zz, zz, indexing="ij")
        edge = np.ones(npts)
        edge[[0, -1]] = 0.5
        wz = np.outer(edge, edge) * h * h * np.exp(-0.5 * (z1**2 + z2**2)) / (2.0 * math.pi)
        integrand = eta.copy()
        for d in active:
            integrand *= _transverse_factor(a, b, c, delta, depths, p[d], q[d], l if d == i else 0,
                                            m if d == j else 0, theta[d], z1, z2, wz)
        values.append(float(np.dot(dweights, integrand)))
    vals = np.array(values)
    if not np.all(np.isfinite(vals)):
        raise NonConvergent("moment integral is not finite", values)
    change = abs(vals[-1] - vals[-2]) / max(abs(vals[-1]), 1e-300)
    if change > rel_tol:
        raise NonConvergent(f"moment integral changed by {change:.2%} on the last refinement", values)
    return (vals[-1], values) if return_levels else vals[-1]


def moment_exponent_condition(l: int, m: int, p, q, theta_zero: bool) -> bool:
    """Sufficient finiteness condition: ``3l >= 3|p| + |q|``, or ``3l + m >= 3|p| + |q|`` when ``Theta = 0``."""
    lhs = 3 * l + (m if theta_zero else 0)
    return lhs >= 3 * int(np.sum(p)) + int(np.sum(q))
