"""Bounded-Lipschitz distance between finite measures on phase space.

``W_kappa(mu, nu) = sup { int psi d(mu - nu) : |psi| <= 1, Lip(psi) <= kappa }``
with the product metric of :func:`geometry.phase_distance`.  On a finite
support the supremum is a linear program over the values ``psi_i``; it is
solved directly (dual LP) and, independently, as a min-cost transshipment
whose arcs cost ``min(kappa d_ij, 2)`` plus a bank node reached at unit cost.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx
import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .cloud import WeightedCloud
from .errors import SolverFailure, SupportTooLarge
from .geometry import pairwise_phase_distance, stereo_lift

MAX_SUPPORT = 600
CERT_TOL = 1e-9

__all__ = [
    "WeightedCloud", "GridSpec", "HistogramMeasure", "BLDistanceResult", "BinnedDistance", "Solver",
    "bin_cloud", "bl_distance", "bl_distance_flow", "bl_distance_binned", "discrete_measure",
]


class Solver(enum.Enum):
    DualLP = "DualLP"
    Flow = "Flow"


@dataclass
class BLDistanceResult:
    value: float
    potential: np.ndarray
    kappa: float
    solver: Solver
    gap: float
    support_x: np.ndarray = field(repr=False, default=None)
    support_theta: np.ndarray = field(repr=False, default=None)

    def certificate_violation(self) -> float:
        """Largest violation of ``|psi| <= 1`` and ``psi_i - psi_j <= kappa d_ij`` over all pairs."""
        psi = self.potential
        d = pairwise_phase_distance(self.support_x, self.support_theta)
        box = float(np.max(np.abs(psi)) - 1.0)
        lip = float(np.max(psi[:, None] - psi[None, :] - self.kappa * d))
        return max(box, lip, 0.0)


@dataclass(frozen=True)
class DiscreteMeasure:
    x: np.ndarray
    theta: np.ndarray
    masses: np.ndarray


def discrete_measure(obj) -> DiscreteMeasure:
    if isinstance(obj, DiscreteMeasure):
        return obj
    if isinstance(obj, HistogramMeasure):
        return DiscreteMeasure(obj.x, obj.theta, obj.masses)
    if isinstance(obj, WeightedCloud):
        return DiscreteMeasure(obj.x, obj.theta, obj.weights)
    x, theta, m = obj
    return DiscreteMeasure(np.atleast_2d(np.asarray(x, float)), np.atleast_2d(np.asarray(theta, float)),
                           np.atleast_1d(np.asarray(m, float)))


def _merge_support(mu: DiscreteMeasure, nu: DiscreteMeasure):
    pts = np.concatenate([np.concatenate([mu.x, mu.theta], axis=1), np.concatenate([nu.x, nu.theta], axis=1)])
    signed = np.concatenate([mu.masses, -nu.masses])
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    f = np.bincount(inv.reshape(-1), weights=signed, minlength=len(uniq))
    n = mu.x.shape[1]
    return uniq[:, :n], uniq[:, n:], f


def bl_distance(mu, nu, kappa: float, max_support: int = MAX_SUPPORT) -> BLDistanceResult:
    """Exact bounded-Lipschitz distance on the union of two finite supports by LP (HiGHS)."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    mu, nu = discrete_measure(mu), discrete_measure(nu)
    x, th, f = _merge_support(mu, nu)
    m = f.size
    if m > max_support:
        raise SupportTooLarge(f"{m} support points exceed the LP cap of {max_support}")
    if m == 1 or not np.any(f):
        psi = np.sign(f) if m == 1 else np.zeros(m)
        return BLDistanceResult(float(abs(f).sum()) if m == 1 else 0.0, psi.astype(float), kappa,
                                Solver.DualLP, 0.0, x, th)
    d = pairwise_phase_distance(x, th)
    cost = kappa * d
    # pairs with kappa d >= 2 are implied by the box constraints
    i, j = np.nonzero((cost < 2.0) & ~np.eye(m, dtype=bool))
    rows = np.arange(i.size)
    A = sparse.csr_matrix((np.concatenate([np.ones(i.size), -np.ones(i.size)]),
                           (np.concatenate([rows, rows]), np.concatenate([i, j]))), shape=(i.size, m))
    b = cost[i, j]
    res = linprog(-f, A_ub=A if i.size else None, b_ub=b if i.size else None, bounds=[(-1.0, 1.0)] * m,
                  method="highs")
    if res.status != 0:
        raise SolverFailure(f"LP solver failed: {res.message}", residual=getattr(res, "fun", None))
    psi = np.clip(res.x, -1.0, 1.0)
    value = float(f @ psi)
    dual = 0.0
    if i.size:
        dual += float(b @ res.ineqlin.marginals)
    dual += float(-np.sum(res.lower.marginals) + np.sum(res.upper.marginals))
    gap = abs(res.fun - dual)
    out = BLDistanceResult(value, psi, kappa, Solver.DualLP, float(gap), x, th)
    viol = out.certificate_violation()
    if viol > CERT_TOL:
        raise SolverFailure(f"LP potential violates the feasibility certificate by {viol:.3e}", residual=viol)
    return out


def bl_distance_flow(mu, nu, kappa: float, mass_scale: float = 1e12, cost_scale: float = 1e9,
                     max_support: int = MAX_SUPPORT) -> BLDistanceResult:
    """Same distance as a min-cost transshipment, solved by network simplex on integer-scaled data.

    Node ``i`` supplies ``mu_i - nu_i``; transport arcs ``i -> j`` cost
    ``min(kappa d_ij, 2)`` and every node connects to a bank node at unit
    cost in both directions.  The potential is recovered from shortest
    paths in the residual graph.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    mu, nu = discrete_measure(mu), discrete_measure(nu)
    x, th, f = _merge_support(mu, nu)
    m = f.size
    if m > max_support:
        raise SupportTooLarge(f"{m} support points exceed the cap of {max_support}")
    total = float(np.abs(f).sum())
    if total == 0.0:
        return BLDistanceResult(0.0, np.zeros(m), kappa, Solver.Flow, 0.0, x, th)
    scale = mass_scale / total
    # the bank absorbs any rounding imbalance, so supplies need not sum to zero
    supply = np.rint(f * scale).astype(np.int64)
    bank = m
    d = pairwise_phase_distance(x, th)
    cost = np.minimum(kappa * d, 2.0)
    icost = np.rint(cost * cost_scale).astype(np.int64)
    unit = int(round(cost_scale))
    G = nx.DiGraph()
    for k in range(m):
        G.add_node(k, demand=-int(supply[k]))
    G.add_node(bank, demand=int(supply.sum()))
    for a in range(m):
        G.add_edge(a, bank, weight=unit)
        G.add_edge(bank, a, weight=unit)
        for b in range(m):
            if a != b and cost[a, b] < 2.0:
                G.add_edge(a, b, weight=int(icost[a, b]))
    try:
        flow_cost, flow = nx.network_simplex(G)
    except nx.NetworkXException as exc:
        raise SolverFailure(f"network simplex failed: {exc}") from exc
    # residual graph in the same integer costs the simplex optimized
    R = nx.DiGraph()
    R.add_nodes_from(range(m + 1))
    for u, v, wt in G.edges(data="weight"):
        R.add_edge(u, v, weight=wt)
    for u, targets in flow.items():
        for v, fl in targets.items():
            if fl > 0:
                w = -G[u][v]["weight"]
                if R.has_edge(v, u):
                    R[v][u]["weight"] = min(R[v][u]["weight"], w)
                else:
                    R.add_edge(v, u, weight=w)
    try:
        dist = nx.single_source_bellman_ford_path_length(R, bank)
    except nx.NetworkXUnbounded as exc:
        raise SolverFailure("residual graph has a negative cycle; flow not optimal") from exc
    psi = (dist[bank] - np.array([dist[k] for k in range(m)], dtype=float)) / cost_scale
    psi = np.clip(psi, -1.0, 1.0)
    value = float(flow_cost) / (scale * cost_scale)
    gap = abs(value - float(f @ psi))
    return BLDistanceResult(value, psi, kappa, Solver.Flow, gap, x, th)


# ---------------------------------------------------------------- binning

@dataclass(frozen=True)
class GridSpec:
    """Box grid over ``(position, chart)`` coordinates, ``2n - 1`` axes.

    ``units="macroscopic"`` bins ``(x, S(theta))``; ``units="stretched"`` bins
    ``((x' - y') / (2 eps), x^n, S(theta) / eps)``.
    """

    lo: np.ndarray
    hi: np.ndarray
    bins: np.ndarray
    units: str = "macroscopic"
    epsilon: float = 1.0
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        bins = np.asarray(self.bins, dtype=np.int64).reshape(-1)
        if not (lo.size == hi.size == bins.size) or lo.size % 2 == 0:
            raise ValueError("grid needs 2n - 1 axes with matching lo, hi, bins")
        if np.any(hi <= lo) or np.any(bins < 1):
            raise ValueError("grid boxes must be nonempty with positive bin counts")
        if self.units not in ("macroscopic", "stretched"):
            raise ValueError("units must be 'macroscopic' or 'stretched'")
        n = (lo.size + 1) // 2
        anchor = np.zeros(n - 1) if self.anchor is None else np.asarray(self.anchor, dtype=float).reshape(-1)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "anchor", anchor)

    @property
    def dim(self) -> int:
        return (self.lo.size + 1) // 2

    @property
    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / self.bins

    def coordinates(self, x, theta) -> np.ndarray:
        """Grid coordinates of atoms; rows at the south pole come back as NaN."""
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        denom = 1.0 + theta[:, -1]
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(denom[:, None] > 1e-12, theta[:, :-1] / denom[:, None], np.nan)
        pos = x.copy()
        if self.units == "stretched":
            pos[:, :-1] = (pos[:, :-1] - self.anchor) / (2.0 * self.epsilon)
            v = v / self.epsilon
        return np.concatenate([pos, v], axis=1)

    def to_phase(self, coords):
        n = self.dim
        pos = coords[:, :n].copy()
        v = coords[:, n:].copy()
        if self.units == "stretched":
            pos[:, :-1] = self.anchor + 2.0 * self.epsilon * pos[:, :-1]
            v = self.epsilon * v
        return pos, stereo_lift(v)

    def half_diagonals(self, index_arrays) -> np.ndarray:
        """Upper bound on the phase distance from a bin center to any point of the bin."""
        n = self.dim
        w = self.widths.copy()
        if self.units == "stretched":
            w[:n - 1] *= 2.0 * self.epsilon
            w[n:] *= self.epsilon
        pos_hd = 0.5 * math.sqrt(float(np.sum(w[:n] ** 2)))
        chart_hd = 0.5 * math.sqrt(float(np.sum(w[n:] ** 2)))
        # conformal factor is largest at the cell point nearest the chart origin
        lo = self.lo[n:] + index_arrays[:, n:] * self.widths[n:]
        hi = lo + self.widths[n:]
        nearest = np.clip(0.0, lo, hi)
        if self.units == "stretched":
            nearest = self.epsilon * nearest
        cmax = 2.0 / (1.0 + np.sum(nearest**2, axis=1))
        return np.sqrt(pos_hd**2 + (cmax * chart_hd) ** 2)


@dataclass
class HistogramMeasure:
    """Occupied bins of a grid: representative points (bin centers), masses and spill."""

    grid: GridSpec
    index: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    masses: np.ndarray
    half_diagonal: np.ndarray
    spill_mass: float
    transport_bound: float

    @property
    def mass(self) -> float:
        return float(self.masses.sum())

    @property
    def binning_bound(self) -> float:
        """``sum_bins m_bin * halfdiag_bin``; times kappa it bounds the distance to the cloud."""
        return float(self.masses @ self.half_diagonal)


def bin_cloud(cloud: WeightedCloud, grid: GridSpec) -> HistogramMeasure:
    """Mass-preserving binning; atoms outside the grid are recorded as spill."""
    coords = grid.coordinates(cloud.x, cloud.theta)
    rel = (coords - grid.lo) / grid.widths
    idx = np.floor(rel)
    inside = np.all(np.isfinite(rel), axis=1) & np.all(idx >= 0, axis=1) & np.all(idx < grid.bins, axis=1)
    w = cloud.weights
    spill = float(math.fsum(w[~inside]))
    if not np.any(inside):
        n = grid.dim
        empty = np.zeros((0, n))
        return HistogramMeasure(grid, np.zeros((0, 2 * n - 1), np.int64), empty, empty, np.zeros(0), np.zeros(0),
                                spill, 0.0)
    idx = idx[inside].astype(np.int64)
    flat = np.ravel_multi_index(idx.T, grid.bins)
    uniq, inv = np.unique(flat, return_inverse=True)
    masses = np.bincount(inv, weights=w[inside], minlength=uniq.size)
    multi = np.stack(np.unravel_index(uniq, grid.bins), axis=1)
    centers = grid.lo + (multi + 0.5) * grid.widths
    xc, thc = grid.to_phase(centers)
    hd = grid.half_diagonals(multi)
    # exact transport cost of moving every atom to its bin center
    moved = np.sqrt(np.sum((cloud.x[inside] - xc[inv]) ** 2, axis=1) + np.sum((cloud.theta[inside] - thc[inv]) ** 2, axis=1))
    transport = float(w[inside] @ moved)
    return HistogramMeasure(grid, multi, xc, thc, masses, hd, spill, transport)


@dataclass
class BinnedDistance:
    value: float
    budget: float
    binning_term: float
    boundary_term: float
    gap: float
    n_support: int
    result: BLDistanceResult = field(repr=False)

    def __iter__(self):
        yield self.value
        yield self.budget


def bl_distance_binned(cloud_a: WeightedCloud, cloud_b: WeightedCloud, kappa: float, grid: GridSpec,
                       max_support: int = MAX_SUPPORT) -> BinnedDistance:
    """Distance between two clouds after binning both on the same grid, with an explicit error budget.

    budget = kappa * sum(halfdiag * mass) over both histograms
             + 2 * (spill + recorded truncation mass of both clouds) + solver gap.
    """
    ha = bin_cloud(cloud_a, grid)
    hb = bin_cloud(cloud_b, grid)
    n_support = np.unique(np.concatenate([ha.index, hb.index]), axis=0).shape[0]
    if n_support > max_support:
        raise SupportTooLarge(f"{n_support} occupied bins exceed the LP cap of {max_support}; coarsen the grid")
    res = bl_distance(ha, hb, kappa, max_support)
    if _same_cloud(cloud_a, cloud_b):
        # a - b vanishes atom by atom, so binning and spill move nothing
        return BinnedDistance(res.value, res.gap, 0.0, 0.0, res.gap, n_support, res)
    binning = kappa * (ha.binning_bound + hb.binning_bound)
    trunc = float(cloud_a.diagnostics.get("truncation_mass", 0.0)) + float(cloud_b.diagnostics.get("truncation_mass", 0.0))
    boundary = 2.0 * (ha.spill_mass + hb.spill_mass + trunc)
    budget = binning + boundary + res.gap
    return BinnedDistance(res.value, budget, binning, boundary, res.gap, n_support, res)


def _same_cloud(a: WeightedCloud, b: WeightedCloud) -> bool:
    if a is b:
        return True
    return (a.x.shape == b.x.shape and np.array_equal(a.x, b.x) and np.array_equal(a.theta, b.theta)
            and np.array_equal(a.weights, b.weights)
            and a.diagnostics.get("truncation_mass", 0.0) == b.diagnostics.get("truncation_mass", 0.0))
