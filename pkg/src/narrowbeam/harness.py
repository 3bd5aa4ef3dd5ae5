"""Comparison program: Fokker-Planck Monte Carlo (u), pencil-beam superposition
and the ballistic ray measure (v), compared pairwise in the bounded-Lipschitz
distance over a sweep of epsilon, with log-log slope fits.

Experiments are described by a YAML file; see :data:`DEFAULT_CONFIG` for the
schema (``schema_version`` 1).
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import yaml

from .ballistic import RayMeasureSpec, default_ray_step, ray_measure_sample
from .cloud import WeightedCloud
from .coefficients import CoefficientField, restrict_to_ray
from .errors import ConfigError, InsufficientPoints
from .fokker_planck_mc import DEPOSIT_MODES, SimConfig, simulate_occupation
from .geometry import Direction, StretchFrame, stereo_lift
from .pencil_beam import PencilBeamSpec, SourceAtom, default_depth_grid, superpose_sample
from .rng import BLOCK_SIZE, derive_seed
from .wasserstein import GridSpec, bl_distance_binned

SCHEMA_VERSION = 1
FIT_BUDGET_RATIO = 0.25

# consumer labels for seed derivation
_PENCIL_KEY = 1
_MC_KEY = 2

CSV_COLUMNS = (
    "epsilon", "kappa", "W_uv", "W_uv_budget", "W_uufrak", "W_uufrak_budget", "W_vufrak", "W_vufrak_budget",
    "backscatter", "truncation", "n_particles", "seed", "wall_time_s",
)

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "dim": 2,
    "seed": 42,
    "epsilon_list": [0.2, 0.1, 0.05],
    "kappa_rule": {"rule": "fixed", "value": 1.0},
    "sigma": {"kind": "constant", "value": 1.0},
    "lambda": {"kind": "constant", "value": 1.0},
    "source": {"V0": [0.0], "weight": 1.0},
    "monte_carlo": {
        "n_particles": 1_000_000, "dt": 0.02, "t_max": 14.0, "deposit_stride": 100,
        "deposit_mode": "random", "n_seeds": 4, "batch_size": BLOCK_SIZE,
    },
    "pencil": {"n_samples": 1_000_000, "depth_cells": 2048},
    "ballistic": {"dt": None},
    "grid": {
        "units": "stretched", "x_halfwidth": 8.0, "depth_max": 7.0, "v_halfwidth": 4.0,
        "x_bins": 9, "depth_bins": 7, "v_bins": 9,
    },
    "outputs": {"dir": "results", "format": "csv"},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key not in ("source", "sigma", "lambda", "kappa_rule"):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path + key!r} must be a mapping")
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


# ---------------------------------------------------------------- config pieces

@dataclass(frozen=True)
class ProfileSpec:
    """Coefficient field by name: ``constant``, ``affine`` or ``bump``."""

    kind: str
    params: dict

    @classmethod
    def from_dict(cls, d, name: str) -> "ProfileSpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"{name} needs a 'kind'")
        params = {k: v for k, v in d.items() if k != "kind"}
        spec = cls(str(d["kind"]), params)
        spec.field(2 if "center" not in params else len(params["center"]))
        return spec

    def field(self, dim: int) -> CoefficientField:
        p = self.params
        try:
            if self.kind == "constant":
                return CoefficientField.constant(float(p["value"]), dim)
            if self.kind == "affine":
                return CoefficientField.affine(float(p["base"]), float(p["slope"]), dim)
            if self.kind == "bump":
                return CoefficientField.bump(float(p["base"]), float(p["amplitude"]), p["center"], float(p["width"]), dim)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad {self.kind} profile parameters {p}: {exc}") from exc
        raise ConfigError(f"unknown profile kind {self.kind!r}")

    def as_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True)
class KappaRule:
    """``fixed``: kappa = value; ``inverse_epsilon``: kappa = value / epsilon."""

    rule: str
    value: float

    def __post_init__(self):
        if self.rule not in ("fixed", "inverse_epsilon"):
            raise ConfigError("kappa_rule.rule must be 'fixed' or 'inverse_epsilon'")
        if not self.value > 0:
            raise ConfigError("kappa_rule.value must be positive")

    def kappa(self, epsilon: float) -> float:
        if self.rule == "fixed":
            return float(self.value)
        if epsilon <= 0:
            raise ConfigError("inverse_epsilon kappa needs epsilon > 0")
        return float(self.value) / epsilon


@dataclass(frozen=True)
class SourceSpec:
    """Boundary atoms ``(anchor y', V0, weight)``; the incoming direction is ``J(eps V0)``."""

    anchors: tuple
    V0: tuple
    weights: tuple

    @classmethod
    def from_dict(cls, d, dim: int) -> "SourceSpec":
        if not isinstance(d, dict):
            raise ConfigError("source must be a mapping")
        items = d["atoms"] if "atoms" in d else [d]
        anchors, vs, ws = [], [], []
        for it in items:
            unknown = set(it) - {"anchor", "V0", "weight"}
            if unknown:
                raise ConfigError(f"unknown source keys {sorted(unknown)}")
            anchor = [float(a) for a in it.get("anchor", [0.0] * (dim - 1))]
            v0 = [float(a) for a in it.get("V0", [0.0] * (dim - 1))]
            if dim != 2 and len(v0) == 1 and v0 == [0.0]:
                v0 = [0.0] * (dim - 1)
            if dim != 2 and len(anchor) == 1 and anchor == [0.0]:
                anchor = [0.0] * (dim - 1)
            if len(anchor) != dim - 1 or len(v0) != dim - 1:
                raise ConfigError(f"source anchor and V0 need {dim - 1} components")
            w = float(it.get("weight", 1.0))
            if w < 0:
                raise ConfigError("source weights must be nonnegative")
            anchors.append(tuple(anchor))
            vs.append(tuple(v0))
            ws.append(w)
        if not ws or sum(ws) <= 0:
            raise ConfigError("source needs positive total weight")
        return cls(tuple(anchors), tuple(vs), tuple(ws))

    def atoms(self, epsilon: float) -> list:
        out = []
        for anchor, v0, w in zip(self.anchors, self.V0, self.weights):
            eta = stereo_lift(epsilon * np.asarray(v0))
            out.append(SourceAtom(np.asarray(anchor), Direction(eta), w))
        return out

    def as_dict(self) -> dict:
        return {"atoms": [{"anchor": list(a), "V0": list(v), "weight": w}
                          for a, v, w in zip(self.anchors, self.V0, self.weights)]}


@dataclass(frozen=True)
class GridConfig:
    units: str
    x_halfwidth: float
    depth_max: float
    v_halfwidth: float
    x_bins: int
    depth_bins: int
    v_bins: int

    def __post_init__(self):
        if self.units not in ("stretched", "macroscopic"):
            raise ConfigError("grid.units must be 'stretched' or 'macroscopic'")
        if min(self.x_halfwidth, self.depth_max, self.v_halfwidth) <= 0 or min(self.x_bins, self.depth_bins, self.v_bins) < 1:
            raise ConfigError("grid extents and bin counts must be positive")

    def grid(self, epsilon: float, dim: int, anchor=None) -> GridSpec:
        k = dim - 1
        lo = [-self.x_halfwidth] * k + [0.0] + [-self.v_halfwidth] * k
        hi = [self.x_halfwidth] * k + [self.depth_max] + [self.v_halfwidth] * k
        bins = [self.x_bins] * k + [self.depth_bins] + [self.v_bins] * k
        if self.units == "stretched" and epsilon > 0:
            return GridSpec(lo, hi, bins, "stretched", epsilon, anchor)
        if anchor is not None:
            a = np.asarray(anchor, dtype=float)
            lo[:k] = list(np.asarray(lo[:k]) + a)
            hi[:k] = list(np.asarray(hi[:k]) + a)
        return GridSpec(lo, hi, bins, "macroscopic")


@dataclass(frozen=True)
class MCSettings:
    n_particles: int
    dt: float
    t_max: float
    deposit_stride: int
    deposit_mode: str
    n_seeds: int
    batch_size: int

    def __post_init__(self):
        if self.n_particles < 1 or self.n_seeds < 1 or self.deposit_stride < 1 or self.batch_size < 1:
            raise ConfigError("monte_carlo counts must be positive")
        if not (self.dt > 0 and self.t_max > 0):
            raise ConfigError("monte_carlo dt and t_max must be positive")
        if self.deposit_mode not in DEPOSIT_MODES:
            raise ConfigError(f"monte_carlo.deposit_mode must be one of {DEPOSIT_MODES}")


@dataclass(frozen=True)
class ExperimentConfig:
    dim: int
    sigma: ProfileSpec
    lam: ProfileSpec
    source: SourceSpec
    epsilon_list: tuple
    kappa_rule: KappaRule
    mc: MCSettings
    pencil_samples: int
    pencil_depth_cells: int
    ray_dt: Optional[float]
    grid: GridConfig
    out_dir: str
    out_format: str
    seed: int
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, raw: Optional[dict] = None) -> "ExperimentConfig":
        raw = {} if raw is None else raw
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
        d = _merge(DEFAULT_CONFIG, raw)
        try:
            dim = int(d["dim"])
            if dim < 2:
                raise ConfigError("dim must be at least 2")
            eps = tuple(float(e) for e in d["epsilon_list"])
            if not eps or any(e < 0 or e > 1 for e in eps):
                raise ConfigError("epsilon_list entries must lie in [0, 1]")
            if any(b >= a for a, b in zip(eps, eps[1:])):
                raise ConfigError("epsilon_list must be strictly decreasing")
            kr = d["kappa_rule"]
            mc = d["monte_carlo"]
            g = d["grid"]
            fmt = d["outputs"]["format"]
            if fmt not in ("csv", "json"):
                raise ConfigError("outputs.format must be csv or json")
            ray_dt = d["ballistic"]["dt"]
            cfg = cls(
                dim=dim,
                sigma=ProfileSpec.from_dict(d["sigma"], "sigma"),
                lam=ProfileSpec.from_dict(d["lambda"], "lambda"),
                source=SourceSpec.from_dict(d["source"], dim),
                epsilon_list=eps,
                kappa_rule=KappaRule(str(kr.get("rule", "fixed")), float(kr.get("value", 1.0))),
                mc=MCSettings(int(mc["n_particles"]), float(mc["dt"]), float(mc["t_max"]), int(mc["deposit_stride"]),
                              str(mc["deposit_mode"]), int(mc["n_seeds"]), int(mc["batch_size"])),
                pencil_samples=int(d["pencil"]["n_samples"]),
                pencil_depth_cells=int(d["pencil"]["depth_cells"]),
                ray_dt=None if ray_dt is None else float(ray_dt),
                grid=GridConfig(str(g["units"]), float(g["x_halfwidth"]), float(g["depth_max"]), float(g["v_halfwidth"]),
                                int(g["x_bins"]), int(g["depth_bins"]), int(g["v_bins"])),
                out_dir=str(d["outputs"]["dir"]),
                out_format=fmt,
                seed=int(d["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc
        if cfg.pencil_samples < 1 or cfg.pencil_depth_cells < 1:
            raise ConfigError("pencil sample and depth cell counts must be positive")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(raw or {})

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "dim": self.dim,
            "seed": self.seed,
            "epsilon_list": list(self.epsilon_list),
            "kappa_rule": {"rule": self.kappa_rule.rule, "value": self.kappa_rule.value},
            "sigma": self.sigma.as_dict(),
            "lambda": self.lam.as_dict(),
            "source": self.source.as_dict(),
            "monte_carlo": {
                "n_particles": self.mc.n_particles, "dt": self.mc.dt, "t_max": self.mc.t_max,
                "deposit_stride": self.mc.deposit_stride, "deposit_mode": self.mc.deposit_mode,
                "n_seeds": self.mc.n_seeds, "batch_size": self.mc.batch_size,
            },
            "pencil": {"n_samples": self.pencil_samples, "depth_cells": self.pencil_depth_cells},
            "ballistic": {"dt": self.ray_dt},
            "grid": {
                "units": self.grid.units, "x_halfwidth": self.grid.x_halfwidth, "depth_max": self.grid.depth_max,
                "v_halfwidth": self.grid.v_halfwidth, "x_bins": self.grid.x_bins, "depth_bins": self.grid.depth_bins,
                "v_bins": self.grid.v_bins,
            },
            "outputs": {"dir": self.out_dir, "format": self.out_format},
        }

    def replace(self, **overrides) -> "ExperimentConfig":
        """New config from ``to_dict`` with dotted-key overrides, e.g. ``{"monte_carlo.n_particles": 10}``."""
        d = self.to_dict()
        for key, val in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        return ExperimentConfig.from_dict(d)

    # model builders
    def fields(self):
        return self.sigma.field(self.dim), self.lam.field(self.dim)

    def sim_config(self, epsilon: float, replicate: int) -> SimConfig:
        return SimConfig(epsilon=epsilon, dt=self.mc.dt, n_particles=self.mc.n_particles, t_max=self.mc.t_max,
                         seed=derive_seed(self.seed, _MC_KEY, replicate), dim=self.dim,
                         deposit_stride=self.mc.deposit_stride, deposit_mode=self.mc.deposit_mode,
                         batch_size=self.mc.batch_size)

    def anchor(self) -> np.ndarray:
        w = np.asarray(self.source.weights)
        return (np.asarray(self.source.anchors) * w[:, None]).sum(axis=0) / w.sum()


# ---------------------------------------------------------------- model clouds

def ballistic_cloud(atoms: Sequence[SourceAtom], lam: CoefficientField, dt: float, t_max: float) -> WeightedCloud:
    parts = []
    for a in atoms:
        origin = np.append(np.asarray(a.anchor, dtype=float), 0.0)
        spec = RayMeasureSpec(origin, a.direction, restrict_to_ray(lam, origin, a.direction), dt, t_max)
        parts.append(ray_measure_sample(spec).scaled(a.weight))
        parts[-1].diagnostics["truncation_mass"] *= a.weight
    return WeightedCloud.concatenate(parts)


def pencil_cloud(cfg: ExperimentConfig, epsilon: float) -> WeightedCloud:
    sigma, lam = cfg.fields()
    atoms = cfg.source.atoms(epsilon)
    # depth grid sized from the first atom; the beams share coefficients up to translation
    spec = PencilBeamSpec.from_fields(StretchFrame(epsilon, cfg.dim, atoms[0].anchor), atoms[0].direction, sigma, lam)
    grid = default_depth_grid(spec, cfg.pencil_depth_cells)
    return superpose_sample(atoms, epsilon, cfg.pencil_samples, derive_seed(cfg.seed, _PENCIL_KEY), sigma, lam, grid)


def mc_cloud(cfg: ExperimentConfig, epsilon: float, replicate: int):
    sigma, lam = cfg.fields()
    return simulate_occupation(cfg.source.atoms(epsilon), sigma, lam, cfg.sim_config(epsilon, replicate))


# ---------------------------------------------------------------- comparison

@dataclass
class ComparisonRecord:
    epsilon: float
    kappa: float
    W_uv: float
    W_uv_budget: float
    W_uufrak: float
    W_uufrak_budget: float
    W_vufrak: float
    W_vufrak_budget: float
    backscatter: float
    truncation: float
    n_particles: int
    seed: int
    wall_time_s: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def _aggregate(values, budgets):
    """Seed mean, plus the mean certified budget and the standard error across seeds."""
    values = np.asarray(values, dtype=float)
    mean = math.fsum(values) / values.size
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, math.fsum(budgets) / len(budgets), stderr


def run_comparison_multi(cfg: ExperimentConfig, epsilon: float, kappas: Sequence[float], log=None) -> list:
    """One record per kappa; the clouds are built once and shared between kappas.

    Each Monte Carlo replicate is binned and discarded before the next starts,
    so memory stays at one cloud.  Values are replicate means; budgets add
    the replicate standard error to the mean certified binning budget.
    """
    t0 = time.perf_counter()
    kappas = [float(k) for k in kappas]
    sigma, lam = cfg.fields()
    atoms = cfg.source.atoms(epsilon)
    grid = cfg.grid.grid(epsilon, cfg.dim, cfg.anchor())
    ray_dt = cfg.ray_dt if cfg.ray_dt is not None else (default_ray_step(epsilon) if epsilon > 0 else cfg.mc.dt)
    v = ballistic_cloud(atoms, lam, ray_dt, cfg.mc.t_max)
    uf = pencil_cloud(cfg, epsilon) if epsilon > 0 else None

    vuf = {}
    if uf is not None:
        for k in kappas:
            vuf[k] = bl_distance_binned(v, uf, k, grid)

    per_k = {k: {"uv": [], "uv_b": [], "uuf": [], "uuf_b": []} for k in kappas}
    runs = []
    for rep in range(cfg.mc.n_seeds):
        u, diag = mc_cloud(cfg, epsilon, rep)
        runs.append({**diag.as_dict(), "budget_residual": diag.budget_residual, "cloud_mass": u.mass,
                     "seed": cfg.sim_config(epsilon, rep).seed})
        for k in kappas:
            r = bl_distance_binned(u, v, k, grid)
            per_k[k]["uv"].append(r.value)
            per_k[k]["uv_b"].append(r.budget)
            if uf is not None:
                r = bl_distance_binned(u, uf, k, grid)
                per_k[k]["uuf"].append(r.value)
                per_k[k]["uuf_b"].append(r.budget)
        if log:
            log(f"eps={epsilon:g} replicate {rep + 1}/{cfg.mc.n_seeds} done")
        del u

    backscatter = math.fsum(r["backscatter_mass"] for r in runs) / len(runs)
    truncation = math.fsum(r["truncation_mass"] for r in runs) / len(runs)
    wall = time.perf_counter() - t0
    records = []
    for k in kappas:
        acc = per_k[k]
        uv, uv_b, uv_se = _aggregate(acc["uv"], acc["uv_b"])
        diagnostics = {"mc_runs": runs, "W_uv_samples": acc["uv"], "W_uv_stderr": uv_se,
                       "ballistic_mass": v.mass, "grid": {"lo": grid.lo.tolist(), "hi": grid.hi.tolist(),
                                                         "bins": grid.bins.tolist(), "units": grid.units}}
        if uf is not None:
            uuf, uuf_b, uuf_se = _aggregate(acc["uuf"], acc["uuf_b"])
            d = vuf[k]
            vu, vu_b = d.value, d.budget
            diagnostics.update({"W_uufrak_samples": acc["uuf"], "W_uufrak_stderr": uuf_se, "pencil_mass": uf.mass,
                                "pencil_truncation": uf.diagnostics.get("truncation_mass", 0.0),
                                "W_vufrak_terms": {"binning": d.binning_term, "boundary": d.boundary_term,
                                                   "gap": d.gap, "n_support": d.n_support}})
            uuf_budget = uuf_b + uuf_se
        else:
            uuf = uuf_budget = vu = vu_b = float("nan")
        records.append(ComparisonRecord(
            epsilon=epsilon, kappa=k, W_uv=uv, W_uv_budget=uv_b + uv_se, W_uufrak=uuf, W_uufrak_budget=uuf_budget,
            W_vufrak=vu, W_vufrak_budget=vu_b, backscatter=backscatter, truncation=truncation,
            n_particles=cfg.mc.n_particles, seed=cfg.seed, wall_time_s=wall, diagnostics=diagnostics))
    return records


def run_comparison(cfg: ExperimentConfig, epsilon: float, kappa: Optional[float] = None, log=None) -> ComparisonRecord:
    k = cfg.kappa_rule.kappa(epsilon) if kappa is None else float(kappa)
    return run_comparison_multi(cfg, epsilon, [k], log)[0]


# ---------------------------------------------------------------- slope fits

@dataclass
class ScalingFit:
    epsilon: np.ndarray
    values: np.ndarray
    budgets: np.ndarray
    used: np.ndarray
    slope: float
    intercept: float
    slope_ci: tuple

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "slope_ci": list(self.slope_ci),
                "epsilon": self.epsilon.tolist(), "values": self.values.tolist(), "budgets": self.budgets.tolist(),
                "used": self.used.tolist()}


def scaling_fit(epsilon, values, budgets=None, max_budget_ratio: float = FIT_BUDGET_RATIO,
                min_points: int = 3) -> ScalingFit:
    """Weighted least squares of ``log value`` on ``log epsilon``.

    Only points with ``budget < max_budget_ratio * value`` enter; each is
    weighted by ``(value / budget)^2``, the inverse squared relative error.
    The interval is the 95% normal interval of the weighted fit.
    """
    eps = np.asarray(epsilon, dtype=float)
    val = np.asarray(values, dtype=float)
    bud = np.zeros_like(val) if budgets is None else np.asarray(budgets, dtype=float)
    used = (eps > 0) & (val > 0) & np.isfinite(val) & np.isfinite(bud) & (bud < max_budget_ratio * val)
    if int(used.sum()) < min_points:
        raise InsufficientPoints(f"{int(used.sum())} of {val.size} points have budget below "
                                 f"{max_budget_ratio:g} x value; need {min_points}")
    x = np.log(eps[used])
    y = np.log(val[used])
    rel = bud[used] / val[used]
    floor = max(float(rel.max()) * 1e-6, 1e-300) if rel.max() > 0 else 1.0
    w = 1.0 / np.maximum(rel, floor) ** 2
    A = np.stack([np.ones_like(x), x], axis=1)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    cov = np.linalg.inv(A.T @ (A * w[:, None]))
    # relative budgets act as the standard deviation of log(value)
    half = 1.96 * math.sqrt(cov[1, 1]) if rel.max() > 0 else 0.0
    slope = float(coef[1])
    return ScalingFit(eps, val, bud, used, slope, float(coef[0]), (slope - half, slope + half))
