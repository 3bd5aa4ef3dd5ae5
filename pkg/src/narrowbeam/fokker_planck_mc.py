"""Monte Carlo occupation measure of the narrow-beam Fokker-Planck equation.

Particles start on the boundary, move at unit speed along ``theta`` while
``theta`` performs Brownian motion on the sphere with generator
``eps^2 sigma Laplace_theta``, and carry a weight attenuated by ``lambda``.
The weighted time spent by all particles is the stationary solution seen as
a measure, so a cloud of deposited atoms estimates ``int psi u`` for
continuous test functions.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .cloud import WeightedCloud
from .coefficients import CoefficientField
from .errors import ConfigError, EmptyWindowError, StepTooLargeError
from .geometry import StretchFrame, normalize, to_stretched
from .pencil_beam import GaussianCovariance, SourceAtom, _allocate
from .rng import BLOCK_SIZE, block_generator

TARGET_ATOMS = 10_000_000
DEPOSIT_MODES = ("random", "midpoint")


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.  ``dt`` is the path-length step.

    ``deposit_mode="random"`` emits one atom per ``deposit_stride`` steps
    carrying the exact occupation weight of that window, placed at a point
    drawn from the window's occupation density; ``"midpoint"`` places the
    atom at the midpoint of the window's last step with weight
    ``w dt deposit_stride``.
    """

    epsilon: float
    dt: float
    n_particles: int
    t_max: float
    seed: int
    dim: int = 2
    deposit_stride: int = 1
    deposit_mode: str = "random"
    batch_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.epsilon < 0.0 or self.epsilon > 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if not (self.dt > 0.0 and self.t_max > 0.0):
            raise ConfigError("dt and t_max must be positive")
        if self.n_particles < 1 or self.deposit_stride < 1 or self.batch_size < 1:
            raise ConfigError("n_particles, deposit_stride and batch_size must be positive")
        if self.dim < 2:
            raise ConfigError("dimension must be at least 2")
        if self.deposit_mode not in DEPOSIT_MODES:
            raise ConfigError(f"deposit_mode must be one of {DEPOSIT_MODES}")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_max / self.dt - 1e-12))

    def max_dt(self, sigma_max: float) -> float:
        diff = self.epsilon**2 * sigma_max * (self.dim - 1)
        return 0.1 if diff == 0.0 else min(0.1, 0.1 / diff)

    def validate_step(self, sigma_max: float):
        if self.dt > self.max_dt(sigma_max) * (1 + 1e-12):
            raise ConfigError(f"dt = {self.dt} exceeds the small-angle limit {self.max_dt(sigma_max):.3g}")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def default_stride(cls, n_particles: int, n_steps: int, target_atoms: int = TARGET_ATOMS) -> int:
        return max(1, int(n_particles * n_steps // target_atoms))


@dataclass
class SimDiagnostics:
    """Weight budget of a run: every unit of initial weight ends in exactly one bucket.

    ``absorbed_mass`` is the weight removed by attenuation, i.e. the
    ``lambda``-weighted occupation.
    """

    initial_mass: float = 0.0
    absorbed_mass: float = 0.0
    backscatter_mass: float = 0.0
    truncation_mass: float = 0.0
    deposited_mass: float = 0.0
    n_particles: int = 0
    n_atoms: int = 0

    @property
    def budget_residual(self) -> float:
        """``initial - (absorbed + backscatter + truncation)``, relative to the initial mass."""
        closed = math.fsum([self.absorbed_mass, self.backscatter_mass, self.truncation_mass])
        return (self.initial_mass - closed) / self.initial_mass

    @classmethod
    def merge(cls, parts: Sequence["SimDiagnostics"]) -> "SimDiagnostics":
        out = cls()
        for name in ("initial_mass", "absorbed_mass", "backscatter_mass", "truncation_mass", "deposited_mass"):
            setattr(out, name, math.fsum(getattr(p, name) for p in parts))
        out.n_particles = sum(p.n_particles for p in parts)
        out.n_atoms = sum(p.n_atoms for p in parts)
        return out

    def as_dict(self) -> dict:
        return asdict(self)


def sphere_bm_step(theta, variance, rng: np.random.Generator) -> np.ndarray:
    """Geodesic Brownian step: tangent Gaussian with per-dimension ``variance``, then follow the great circle.

    ``theta`` has shape ``(..., n)``; ``variance`` broadcasts against ``theta[..., 0]``.
    """
    theta = np.asarray(theta, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0.0) or np.any(variance >= 0.5):
        raise StepTooLargeError("angular step variance must lie in [0, 0.5)")
    sd = np.sqrt(variance)
    if theta.shape[-1] == 2:
        phi = sd * rng.standard_normal(theta.shape[:-1])
        return _rotate2(theta, phi)
    g = rng.standard_normal(theta.shape)
    g -= np.sum(g * theta, axis=-1, keepdims=True) * theta
    g *= sd[..., None] if sd.ndim else sd
    return _geodesic_move(theta, g)


def _rotate2(theta, phi):
    c, s = np.cos(phi), np.sin(phi)
    out = np.empty_like(theta)
    out[..., 0] = c * theta[..., 0] + s * theta[..., 1]
    out[..., 1] = -s * theta[..., 0] + c * theta[..., 1]
    return out


def _geodesic_move(theta, tangent):
    r = np.linalg.norm(tangent, axis=-1, keepdims=True)
    safe = np.where(r > 0, r, 1.0)
    out = np.cos(r) * theta + np.sin(r) * tangent / safe
    # re-normalize away accumulated rounding
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _trunc_exp_sample(u, lam, length):
    """Inverse CDF of the density proportional to ``exp(-lam s)`` on ``[0, length]``."""
    x = lam * length
    small = x < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -np.log1p(u * np.expm1(-x)) / np.where(small, 1.0, lam)
    return np.where(small, u * length, s)


def _occupation(w, lam, length):
    """``int_0^length w exp(-lam s) ds`` and the surviving weight."""
    x = lam * length
    survive = w * np.exp(-x)
    with np.errstate(divide="ignore", invalid="ignore"):
        occ = np.where(x > 1e-12, w * (-np.expm1(-x)) / np.where(lam > 0, lam, 1.0), w * length)
    return occ, survive


def _simulate_batch(cfg: SimConfig, start_x, start_theta, start_w, sigma: CoefficientField,
                    lam: CoefficientField, block: int, stream: int):
    """Run one batch of particles; returns (x, theta, weights, particle_id) arrays and diagnostics."""
    gen = block_generator(cfg.seed, stream, block)
    B, n = start_x.shape
    x = start_x.copy()
    theta = start_theta.copy()
    w = start_w.copy()
    alive = np.ones(B, dtype=bool)
    absorbed = np.zeros(B)
    back = np.zeros(B)
    dt = cfg.dt
    eps2 = cfg.epsilon**2
    const_sigma = sigma.kind == "constant"
    const_lam = lam.kind == "constant"
    lam_val = lam.params["value"] if const_lam else None
    sig_val = sigma.params["value"] if const_sigma else None
    stride = cfg.deposit_stride
    random_mode = cfg.deposit_mode == "random"

    win_w = np.zeros(B)
    win_x = np.zeros((B, n))
    win_th = np.zeros((B, n))
    out_x, out_th, out_w, out_id = [], [], [], []
    ids = np.arange(B)

    def flush():
        sel = win_w > 0.0
        if np.any(sel):
            out_x.append(win_x[sel].copy())
            out_th.append(win_th[sel].copy())
            out_w.append(win_w[sel].copy())
            out_id.append(ids[sel])
        win_w[:] = 0.0

    for k in range(cfg.n_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xa = x[idx]
        tha = theta[idx]
        wa = w[idx]
        if eps2 > 0.0:
            svals = sig_val if const_sigma else sigma(xa)
            var = 2.0 * eps2 * svals * dt
            th_new = sphere_bm_step(tha, np.broadcast_to(var, (idx.size,)), gen)
        else:
            th_new = tha
        chord = 0.5 * (tha + th_new) * dt
        x_new = xa + chord
        lvals = np.full(idx.size, lam_val) if const_lam else lam(xa + 0.5 * chord)
        crossed = x_new[:, -1] < 0.0
        frac = np.ones(idx.size)
        if np.any(crossed):
            denom = xa[crossed, -1] - x_new[crossed, -1]
            frac[crossed] = np.clip(xa[crossed, -1] / denom, 0.0, 1.0)
        length = frac * dt
        occ, survive = _occupation(wa, lvals, length)
        absorbed[idx] += wa - survive
        u = gen.random(idx.size)

        if random_mode:
            wsum = win_w[idx] + occ
            with np.errstate(divide="ignore", invalid="ignore"):
                p = np.where(wsum > 0, occ / wsum, 0.0)
            take = u < p
            win_w[idx] = wsum
            if np.any(take):
                t_idx = idx[take]
                v = np.minimum(u[take] / p[take], 1.0 - 1e-16)
                s = _trunc_exp_sample(v, lvals[take], length[take])
                win_x[t_idx] = xa[take] + (s / dt)[:, None] * chord[take]
                win_th[t_idx] = np.where((s < 0.5 * dt)[:, None], tha[take], th_new[take])
        elif (k + 1) % stride == 0:
            half = 0.5 * length
            w_mid = wa * np.exp(-lvals * half)
            win_w[idx] = w_mid * length * stride
            win_x[idx] = xa + (half / dt)[:, None] * chord
            win_th[idx] = normalize(tha + th_new)

        if np.any(crossed):
            gone = idx[crossed]
            back[gone] += survive[crossed]
            survive = np.where(crossed, 0.0, survive)
            alive[gone] = False
        x[idx] = x_new
        theta[idx] = th_new
        w[idx] = survive
        if (k + 1) % stride == 0:
            flush()
    flush()
    trunc = np.where(alive, w, 0.0)

    if out_w:
        ax = np.concatenate(out_x)
        ath = np.concatenate(out_th)
        aw = np.concatenate(out_w)
        aid = np.concatenate(out_id)
        order = np.argsort(aid, kind="stable")
        ax, ath, aw, aid = ax[order], ath[order], aw[order], aid[order]
    else:
        ax = np.zeros((0, n))
        ath = np.zeros((0, n))
        aw = np.zeros(0)
        aid = np.zeros(0, dtype=np.int64)
    diag = SimDiagnostics(
        initial_mass=math.fsum(start_w),
        absorbed_mass=math.fsum(absorbed),
        backscatter_mass=math.fsum(back),
        truncation_mass=math.fsum(trunc),
        deposited_mass=math.fsum(aw),
        n_particles=B,
        n_atoms=aw.size,
    )
    return ax, ath, aw, aid, diag


def _batch_planar(cfg: SimConfig, start_x, start_theta, start_w, sigma: CoefficientField,
                  lam: CoefficientField, block: int, stream: int):
    """Same scheme as :func:`_simulate_batch` for ``n = 2``, with the direction stored as an angle.

    All particles are advanced every step (dead ones carry zero weight);
    this avoids gathers and is several times faster.  For ``n = 2`` the
    geodesic step is a rotation by a Gaussian angle, so both paths consume
    the random stream identically.
    """
    gen = block_generator(cfg.seed, stream, block)
    B = start_x.shape[0]
    x0 = start_x[:, 0].copy()
    x1 = start_x[:, 1].copy()
    phi = np.arctan2(start_theta[:, 0], start_theta[:, 1])
    s_old, c_old = np.sin(phi), np.cos(phi)
    w = start_w.copy()
    alive = np.ones(B, dtype=bool)
    absorbed = np.zeros(B)
    back = np.zeros(B)
    dt = cfg.dt
    eps2 = cfg.epsilon**2
    const_sigma = sigma.kind == "constant"
    const_lam = lam.kind == "constant"
    stride = cfg.deposit_stride
    random_mode = cfg.deposit_mode == "random"
    if const_sigma:
        sd_const = math.sqrt(2.0 * eps2 * sigma.params["value"] * dt)
        if 2.0 * eps2 * sigma.params["value"] * dt >= 0.5:
            raise StepTooLargeError("angular step variance must lie in [0, 0.5)")
    if const_lam:
        lam_c = lam.params["value"]
        att_c = math.exp(-lam_c * dt)
        occ_c = -math.expm1(-lam_c * dt) / lam_c if lam_c > 0 else dt

    win_w = np.zeros(B)
    win = np.zeros((B, 4))
    out, out_w, out_id = [], [], []
    ids = np.arange(B)

    def flush():
        sel = win_w > 0.0
        if np.any(sel):
            out.append(win[sel])
            out_w.append(win_w[sel])
            out_id.append(ids[sel])
        win_w[:] = 0.0

    for k in range(cfg.n_steps):
        if eps2 > 0.0:
            z = gen.standard_normal(B)
            if const_sigma:
                phi = phi + sd_const * z
            else:
                var = 2.0 * eps2 * sigma(np.stack([x0, x1], axis=-1)) * dt
                if np.any(var >= 0.5):
                    raise StepTooLargeError("angular step variance must lie in [0, 0.5)")
                phi = phi + np.sqrt(var) * z
            s_new, c_new = np.sin(phi), np.cos(phi)
        else:
            s_new, c_new = s_old, c_old
        ch0 = 0.5 * dt * (s_old + s_new)
        ch1 = 0.5 * dt * (c_old + c_new)
        y0 = x0 + ch0
        y1 = x1 + ch1
        crossed = (y1 < 0.0) & alive
        any_cross = bool(crossed.any())
        if const_lam and not any_cross:
            lvals = lam_c
            length = dt
            survive = w * att_c
            occ = w * occ_c
        else:
            lvals = np.full(B, lam_c) if const_lam else lam(np.stack([x0 + 0.5 * ch0, x1 + 0.5 * ch1], axis=-1))
            frac = np.ones(B)
            if any_cross:
                frac[crossed] = np.clip(x1[crossed] / (x1[crossed] - y1[crossed]), 0.0, 1.0)
            length = frac * dt
            occ, survive = _occupation(w, lvals, length)
        absorbed += w - survive
        u = gen.random(B)

        if random_mode:
            # weighted reservoir of size one; u / p is a fresh uniform given u < p
            win_w += occ
            take = np.flatnonzero(u * win_w < occ)
            if take.size:
                v = np.minimum(u[take] * win_w[take] / occ[take], 1.0 - 1e-16)
                lt = lvals if np.isscalar(lvals) else lvals[take]
                ln = length if np.isscalar(length) else length[take]
                sfrac = _trunc_exp_sample(v, lt, ln) / dt
                late = sfrac >= 0.5
                win[take, 0] = x0[take] + sfrac * ch0[take]
                win[take, 1] = x1[take] + sfrac * ch1[take]
                win[take, 2] = np.where(late, s_new[take], s_old[take])
                win[take, 3] = np.where(late, c_new[take], c_old[take])
        elif (k + 1) % stride == 0:
            half = 0.5 * np.broadcast_to(length, (B,))
            win_w = w * np.exp(-lvals * half) * length * stride
            hf = half / dt
            win[:, 0] = x0 + hf * ch0
            win[:, 1] = x1 + hf * ch1
            norm = np.hypot(s_old + s_new, c_old + c_new)
            win[:, 2] = (s_old + s_new) / norm
            win[:, 3] = (c_old + c_new) / norm

        if any_cross:
            back[crossed] += survive[crossed]
            survive = np.where(crossed, 0.0, survive)
            alive &= ~crossed
        x0, x1, w = y0, y1, survive
        s_old, c_old = s_new, c_new
        if (k + 1) % stride == 0:
            flush()
    flush()
    trunc = np.where(alive, w, 0.0)
    if out_w:
        rec = np.concatenate(out)
        aw = np.concatenate(out_w)
        aid = np.concatenate(out_id)
        order = np.argsort(aid, kind="stable")
        rec, aw = rec[order], aw[order]
    else:
        rec = np.zeros((0, 4))
        aw = np.zeros(0)
    diag = SimDiagnostics(
        initial_mass=math.fsum(start_w),
        absorbed_mass=math.fsum(absorbed),
        backscatter_mass=math.fsum(back),
        truncation_mass=math.fsum(trunc),
        deposited_mass=math.fsum(aw),
        n_particles=B,
        n_atoms=aw.size,
    )
    return rec[:, :2], rec[:, 2:], aw, None, diag


def thread_count() -> int:
    env = os.environ.get("NARROWBEAM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("NARROWBEAM_THREADS must be an integer")
    return 1


def simulate_occupation(source, sigma: CoefficientField, lam: CoefficientField, cfg: SimConfig):
    """Occupation cloud and weight budget for a boundary source.

    ``source`` is a :class:`SourceAtom` or a sequence of them; particles are
    split between atoms in proportion to their weights.  Batches are keyed
    by ``(seed, batch index)`` and reduced in batch order, so the output does
    not depend on ``NARROWBEAM_THREADS``.
    """
    atoms = [source] if isinstance(source, SourceAtom) else list(source)
    if not atoms:
        raise ConfigError("empty source")
    cfg.validate_step(sigma.upper_bound)
    n = cfg.dim
    g = np.array([a.weight for a in atoms], dtype=float)
    counts = _allocate(g, cfg.n_particles)
    start_x = np.zeros((cfg.n_particles, n))
    start_th = np.zeros((cfg.n_particles, n))
    start_w = np.zeros(cfg.n_particles)
    pos = 0
    for a, cnt, weight in zip(atoms, counts, g):
        eta = a.direction.components
        if eta.size != n or eta[-1] <= 0.0:
            raise ConfigError("source atoms must be incoming directions of dimension n")
        start_x[pos:pos + cnt, :-1] = np.asarray(a.anchor, dtype=float).reshape(-1)
        start_th[pos:pos + cnt] = eta
        start_w[pos:pos + cnt] = weight / cnt if cnt else 0.0
        pos += cnt

    jobs = [(b, s, min(cfg.n_particles, s + cfg.batch_size))
            for b, s in enumerate(range(0, cfg.n_particles, cfg.batch_size))]

    def run(job):
        b, s, e = job
        kernel = _batch_planar if n == 2 else _simulate_batch
        return kernel(cfg, start_x[s:e], start_th[s:e], start_w[s:e], sigma, lam, b, 0)

    threads = thread_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    diag = SimDiagnostics.merge([r[4] for r in results])
    cloud = WeightedCloud(np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results]),
                          np.concatenate([r[2] for r in results]),
                          {"backscatter_mass": diag.backscatter_mass, "truncation_mass": diag.truncation_mass,
                           "absorbed_mass": diag.absorbed_mass, "initial_mass": diag.initial_mass})
    return cloud, diag


def stretched_stats(cloud: WeightedCloud, frame: StretchFrame, depth: float, window: float,
                    return_errors: bool = False, n_groups: int = 20):
    """Weighted mean and covariance of ``(X', V)`` over atoms with ``|x^n - depth| < window``.

    Variances are averaged over transverse dimensions.  With
    ``return_errors`` the standard errors of ``(var_X, var_V, cov_XV)`` are
    estimated from ``n_groups`` contiguous groups of atoms (batch means).
    """
    sel = np.abs(cloud.x[:, -1] - depth) < window
    if not np.any(sel) or cloud.weights[sel].sum() <= 0:
        raise EmptyWindowError(f"no atoms within {window} of depth {depth}")
    Xp, _, V = to_stretched(frame, cloud.x[sel], cloud.theta[sel])
    w = cloud.weights[sel]

    def moments(Xp, V, w):
        W = w.sum()
        mx = w @ Xp / W
        mv = w @ V / W
        dx = Xp - mx
        dv = V - mv
        var_x = float(np.mean(w @ (dx * dx) / W))
        var_v = float(np.mean(w @ (dv * dv) / W))
        cov = float(np.mean(w @ (dx * dv) / W))
        return mx, mv, var_x, var_v, cov

    mx, mv, var_x, var_v, cov = moments(Xp, V, w)
    result = GaussianCovariance(var_x, var_v, cov, mx, mv)
    if not return_errors:
        return result
    groups = np.array_split(np.arange(w.size), n_groups)
    est = np.array([moments(Xp[gi], V[gi], w[gi])[2:] for gi in groups if w[gi].sum() > 0])
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    return result, tuple(float(v) for v in se)


# ---------------------------------------------------------------- cloud files

_MAGIC = b"NBCLOUD1"


def cloud_header(cfg: SimConfig, extra: dict | None = None) -> dict:
    head = {"dim": cfg.dim, "epsilon": cfg.epsilon, "seed": cfg.seed, "config_hash": cfg.config_hash()}
    if extra:
        head.update(extra)
    return head


def write_cloud_binary(path, cloud: WeightedCloud, header: dict):
    """Binary layout: magic, uint32 LE header length, UTF-8 JSON header, then
    little-endian float64 records ``x[0..n), theta[0..n), weight``."""
    head = dict(header)
    head.setdefault("dim", cloud.dim)
    head["n_atoms"] = len(cloud)
    head["diagnostics"] = {k: v for k, v in cloud.diagnostics.items() if isinstance(v, (int, float))}
    blob = json.dumps(head, sort_keys=True).encode()
    rec = np.concatenate([cloud.x, cloud.theta, cloud.weights[:, None]], axis=1).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())


def read_cloud_binary(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a narrowbeam cloud file")
        (length,) = struct.unpack("<I", fh.read(4))
        head = json.loads(fh.read(length).decode())
        rec = np.frombuffer(fh.read(), dtype="<f8")
    n = int(head["dim"])
    rec = rec.reshape(-1, 2 * n + 1)
    cloud = WeightedCloud(rec[:, :n], rec[:, n:2 * n], rec[:, -1], dict(head.get("diagnostics", {})))
    return cloud, head


def write_cloud_csv(path, cloud: WeightedCloud, header: dict):
    n = cloud.dim
    head = dict(header)
    head.setdefault("dim", n)
    cols = [f"x{i}" for i in range(n)] + [f"theta{i}" for i in range(n)] + ["weight"]
    rec = np.concatenate([cloud.x, cloud.theta, cloud.weights[:, None]], axis=1)
    with open(path, "w") as fh:
        for key in sorted(head):
            fh.write(f"# {key}={json.dumps(head[key])}\n")
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, rec, delimiter=",", fmt="%.17g")


def read_cloud_csv(path):
    head = {}
    with open(path) as fh:
        lines = fh.readlines()
    body = 0
    for body, line in enumerate(lines):
        if not line.startswith("#"):
            break
        key, _, val = line[1:].strip().partition("=")
        head[key] = json.loads(val)
    rec = np.loadtxt(lines[body + 1:], delimiter=",", ndmin=2)
    n = int(head["dim"])
    return WeightedCloud(rec[:, :n], rec[:, n:2 * n], rec[:, -1]), head


def read_cloud(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
    return read_cloud_binary(path) if magic == _MAGIC else read_cloud_csv(path)
