"""Acceptance criteria, one verdict line per criterion.

Every criterion is checked clause by clause; the printed line lists each
clause with its measured value so a failing run shows exactly which clause
broke.  Tolerances and sample sizes are the contract values.
"""

import itertools
import math
import time

import numpy as np
import pytest

from narrowbeam.coefficients import MomentTriple, Profile
from narrowbeam.errors import InsufficientPoints, NonConvergent
from narrowbeam.fokker_planck_mc import stretched_stats
from narrowbeam.geometry import StretchFrame, StretchedPoint, north_pole, stereo_lift
from narrowbeam.harness import ExperimentConfig, run_comparison_multi, scaling_fit
from narrowbeam.pencil_beam import (PencilBeamSpec, backward_eval, h_kernel_eval, kernel_params, moment_exponent_condition,
                                    moment_integral, pencil_eval, pencil_sample)
from narrowbeam.wasserstein import bl_distance, bl_distance_flow


def whitened_integral(func, mean, cov, n_nodes, width=8.0):
    """Integral of ``func`` over R^d by Gauss-Legendre on a +-width sd box in whitened coordinates."""
    d = len(mean)
    L = np.linalg.cholesky(cov)
    z, w = np.polynomial.legendre.leggauss(n_nodes)
    z, w = width * z, width * w
    grids = np.meshgrid(*([z] * d), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=1)
    W = np.ones(Z.shape[0])
    for g in np.meshgrid(*([w] * d), indexing="ij"):
        W *= g.ravel()
    pts = mean + Z @ L.T
    return float(np.dot(W, func(pts))) * abs(np.linalg.det(L))


def random_moments(rng):
    a = rng.uniform(0.05, 3.0)
    c = rng.uniform(0.05, 3.0)
    b = rng.uniform(-0.95, 0.95) * math.sqrt(a * c)
    return MomentTriple(a, b, c, a * c - b * b, 1.0)


# ---------------------------------------------------------------- 1

def test_criterion_1_kernel_and_mass_identities(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    kernel_err = {2: 0.0, 3: 0.0}
    for _ in range(20):
        m = random_moments(rng)
        # the kernel is exp(-z.A z) per transverse pair, so its covariance is inv(2A)
        cov2 = np.linalg.inv(2.0 * np.array([[m.a, m.b], [m.b, m.c]]) / (4.0 * m.delta))
        for dim, nodes in ((2, 64), (3, 34)):
            k = dim - 1
            params = kernel_params(m, dim)
            cov = np.zeros((2 * k, 2 * k))
            for d in range(k):
                # coordinates ordered (X'_1..X'_k, V_1..V_k)
                cov[np.ix_([d, k + d], [d, k + d])] = cov2
            val = whitened_integral(lambda p: h_kernel_eval(params, p[:, :k], p[:, k:]), np.zeros(2 * k), cov, nodes)
            kernel_err[dim] = max(kernel_err[dim], abs(val - 1.0))

    sig = 0.25
    mass_err = {}
    for name, lam, optical in (("constant", Profile.constant(0.7), lambda T: 0.7 * T),
                               ("affine", Profile.affine(0.5, 0.3), lambda T: 0.5 * T + 0.15 * T * T)):
        spec = PencilBeamSpec(StretchFrame(0.1, 2), north_pole(2), Profile.constant(sig), lam)
        worst = 0.0
        for T in np.linspace(0.05, 5.0, 20):
            cov = np.array([[2 * sig * T**3 / 3, sig * T**2], [sig * T**2, 2 * sig * T]])
            val = whitened_integral(lambda p: pencil_eval(spec, p[:, :1], np.full(p.shape[0], T), p[:, 1:]),
                                    np.zeros(2), cov, 64)
            worst = max(worst, abs(val - math.exp(-optical(T))))
        mass_err[name] = worst
    runtime = time.perf_counter() - t0

    clauses = {
        "kernel n=2": kernel_err[2] < 1e-8, "kernel n=3": kernel_err[3] < 1e-8,
        "mass constant": mass_err["constant"] < 1e-8, "mass affine": mass_err["affine"] < 1e-8,
        "runtime": runtime < 10.0,
    }
    ok = all(clauses.values())
    acceptance(1, ok, f"max|int H - 1| n=2 {kernel_err[2]:.1e}, n=3 {kernel_err[3]:.1e}; "
                      f"max|mass - exp(-int lambda)| constant {mass_err['constant']:.1e}, "
                      f"affine {mass_err['affine']:.1e} (tol 1e-8); runtime {runtime:.1f}s (< 10s)")
    assert ok, clauses


# ---------------------------------------------------------------- 2

def sample_second_moments(xp, v, w=None):
    """Weighted (var V, var X', cov) and their standard errors from the product samples."""
    w = np.full(xp.size, 1.0 / xp.size) if w is None else w / w.sum()
    n_eff = 1.0 / np.sum(w * w)
    xc = xp - np.dot(w, xp)
    vc = v - np.dot(w, v)
    out, err = [], []
    for prod in (vc * vc, xc * xc, xc * vc):
        mean = float(np.dot(w, prod))
        out.append(mean)
        err.append(math.sqrt(float(np.dot(w, (prod - mean) ** 2)) / n_eff))
    return np.array(out), np.array(err)


def test_criterion_2_fermi_eyges_covariance(acceptance):
    t0 = time.perf_counter()
    sig, T = 0.25, 1.5
    ref = np.array([2 * sig * T, 2 * sig * T**3 / 3, sig * T**2])

    spec = PencilBeamSpec(StretchFrame(0.1, 2), north_pole(2), Profile.constant(sig), Profile.constant(1.0))
    # a two-node grid whose first node is the boundary puts every atom at depth T
    cloud = pencil_sample(spec, 1_000_000, [0.0, T], rng_seed=17, conformal_weight=False, depth_mode="nodes")
    assert np.allclose(cloud.x[:, -1], T)
    stats, errs = stretched_stats(cloud, spec.frame, T, 1e-9, return_errors=True)
    got_pencil = np.array([stats.var_V, stats.var_X, stats.cov_XV])
    err_pencil = np.array([errs[1], errs[0], errs[2]])
    z_pencil = np.abs(got_pencil - ref) / err_pencil

    # Euler-Maruyama for dX' = V dXn, dV = sqrt(2 sigma) dB
    rng = np.random.default_rng(91)
    n, dt = 400_000, 1e-3
    xp = np.zeros(n)
    v = np.zeros(n)
    amp = math.sqrt(2 * sig * dt)
    for _ in range(int(round(T / dt))):
        xp += v * dt
        v += amp * rng.standard_normal(n)
    got_sde, err_sde = sample_second_moments(xp, v)
    z_sde = np.abs(got_sde - ref) / err_sde
    runtime = time.perf_counter() - t0

    ok = bool(np.all(z_pencil < 4) and np.all(z_sde < 4) and runtime < 60)
    acceptance(2, ok, f"(VarV, VarX', Cov) ref {np.round(ref, 5).tolist()}; pencil N=1e6 z "
                      f"{np.round(z_pencil, 2).tolist()}; Euler dt=1e-3 N=4e5 z {np.round(z_sde, 2).tolist()} "
                      f"(< 4); runtime {runtime:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 3

def random_measure(rng, k, mass_lo=0.05, mass_hi=1.0, dim=2):
    x = rng.uniform(0.0, 1.5, (k, dim))
    ang = rng.normal(size=(k, dim))
    th = ang / np.linalg.norm(ang, axis=1, keepdims=True)
    return x, th, rng.uniform(mass_lo, mass_hi, k)


def test_criterion_3_wasserstein_solvers(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    agree = 0.0
    for _ in range(50):
        mu = random_measure(rng, int(rng.integers(1, 31)))
        nu = random_measure(rng, int(rng.integers(1, 31)))
        kappa = float(rng.uniform(0.2, 5.0))
        agree = max(agree, abs(bl_distance(mu, nu, kappa).value - bl_distance_flow(mu, nu, kappa).value))

    delta = 0.0
    th = np.array([[0.0, 1.0]])
    for _ in range(40):
        d = float(rng.uniform(0.0, 4.0))
        kappa = float(rng.uniform(0.1, 6.0))
        r = bl_distance((np.zeros((1, 2)), th, [1.0]), (np.array([[d, 0.0]]), th, [1.0]), kappa)
        delta = max(delta, abs(r.value - min(2.0, kappa * d)))

    mono_viol = 0.0
    for _ in range(30):
        mu, nu = random_measure(rng, 12), random_measure(rng, 9)
        k1, k2 = sorted(rng.uniform(0.1, 8.0, 2))
        mono_viol = max(mono_viol, bl_distance(mu, nu, k1).value - bl_distance(mu, nu, k2).value)

    tri_slack = math.inf
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        a, b, c = (random_measure(rng, k) for _ in range(3))
        for m in (b, c):
            m[2][:] *= a[2].sum() / m[2].sum()
        kappa = float(rng.uniform(0.3, 4.0))
        ab, bc, ac = (bl_distance(p, q, kappa).value for p, q in ((a, b), (b, c), (a, c)))
        tri_slack = min(tri_slack, ab + bc - ac)
    runtime = time.perf_counter() - t0

    ok = agree < 1e-8 and delta < 1e-9 and mono_viol <= 1e-9 and tri_slack >= -1e-9 and runtime < 60
    acceptance(3, ok, f"max|LP - flow| {agree:.1e} (< 1e-8) on 50; max|delta - min(2, kd)| {delta:.1e} (< 1e-9); "
                      f"kappa monotone violation {mono_viol:.1e}; min triangle slack {tri_slack:.1e} over 1000; "
                      f"runtime {runtime:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 4, 5, 8

SWEEP_EPS = (0.2, 0.1, 0.05)


@pytest.fixture(scope="module")
def sweep():
    cfg = ExperimentConfig.from_dict()
    t0 = time.perf_counter()
    out = {}
    for eps in SWEEP_EPS:
        fixed, inverse = run_comparison_multi(cfg, eps, [1.0, 1.0 / eps])
        out[eps] = {"fixed": fixed, "inverse": inverse}
    return cfg, out, time.perf_counter() - t0


def fitted_slope(eps, values, budgets):
    try:
        fit = scaling_fit(eps, values, budgets)
    except InsufficientPoints as exc:
        return None, str(exc)
    return fit.slope, f"{fit.slope:.3f}"


def test_criterion_4_exponents(sweep, acceptance):
    cfg, out, runtime = sweep
    assert cfg.mc.n_particles == 1_000_000 and cfg.mc.n_seeds == 4 and cfg.dim == 2
    recs = [out[e]["fixed"] for e in SWEEP_EPS]
    eps = np.array(SWEEP_EPS)
    uu = np.array([r.W_uufrak for r in recs])
    uu_b = np.array([r.W_uufrak_budget for r in recs])
    uv = np.array([r.W_uv for r in recs])
    uv_b = np.array([r.W_uv_budget for r in recs])

    s_uu, d_uu = fitted_slope(eps, uu, uu_b)
    s_uv, d_uv = fitted_slope(eps, uv, uv_b)
    raw_uu = scaling_fit(eps, uu, uu_b, max_budget_ratio=math.inf).slope
    raw_uv = scaling_fit(eps, uv, uv_b, max_budget_ratio=math.inf).slope
    separated = bool(np.all(uu + uu_b < uv - uv_b))
    ratios = np.concatenate([uu_b / uu, uv_b / uv])
    clauses = {
        "slope uu in [1.5, 2.5]": s_uu is not None and 1.5 <= s_uu <= 2.5,
        "slope uv in [0.6, 1.4]": s_uv is not None and 0.6 <= s_uv <= 1.4,
        "budget-separated ordering": separated,
        "budgets < 25%": bool(np.all(ratios < 0.25)),
        "runtime < 30 min": runtime < 1800,
    }
    ok = all(clauses.values())
    failed = [k for k, v in clauses.items() if not v]
    acceptance(4, ok, f"W(u,uf) {np.round(uu, 4).tolist()} budget {np.round(uu_b, 4).tolist()}; "
                      f"W(u,v) {np.round(uv, 4).tolist()} budget {np.round(uv_b, 4).tolist()}; "
                      f"slope uu {d_uu} (all points {raw_uu:.3f}); slope uv {d_uv} (all points {raw_uv:.3f}); "
                      f"max budget/value {ratios.max():.2f}; sweep {runtime / 60:.1f} min"
                      + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


def test_criterion_5_lower_bound(sweep, acceptance):
    cfg, out, runtime = sweep
    recs = [out[e]["inverse"] for e in SWEEP_EPS]
    assert all(math.isclose(r.kappa, 1.0 / r.epsilon) for r in recs)
    vu = np.array([r.W_vufrak for r in recs])
    vu_b = np.array([r.W_vufrak_budget for r in recs])
    uu = np.array([r.W_uufrak for r in recs])
    clauses = {
        "max/min <= 3": vu.max() / vu.min() <= 3.0,
        "value > 10 x budget": bool(np.all(vu > 10.0 * vu_b)),
        "W(u,uf) decreasing": bool(np.all(np.diff(uu) < 0)),
        "runtime < 30 min": runtime < 1800,
    }
    ok = all(clauses.values())
    failed = [k for k, v in clauses.items() if not v]
    acceptance(5, ok, f"kappa = 1/eps: W(v,uf) {np.round(vu, 4).tolist()} max/min {vu.max() / vu.min():.2f} (<= 3); "
                      f"value/budget {np.round(vu / vu_b, 2).tolist()} (> 10); "
                      f"W(u,uf) {np.round(uu, 4).tolist()} (decreasing)"
                      + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


def test_criterion_8_mass_accounting(sweep, acceptance):
    cfg, out, _ = sweep
    assert cfg.lam.kind == "constant"
    lam0 = float(cfg.lam.params["value"])
    worst_res, worst_dep, worst_back = 0.0, 0.0, 0.0
    n_runs = 0
    for eps in SWEEP_EPS:
        for run in out[eps]["fixed"].diagnostics["mc_runs"]:
            n_runs += 1
            init = run["initial_mass"]
            worst_res = max(worst_res, abs(run["budget_residual"]))
            worst_dep = max(worst_dep, run["deposited_mass"] / (init / lam0))
            if eps <= 0.1:
                worst_back = max(worst_back, run["backscatter_mass"] / init)
    ok = worst_res < 1e-10 and worst_dep <= 1.0 and worst_back < 1e-3
    acceptance(8, ok, f"{n_runs} runs: max relative budget residual {worst_res:.1e} (< 1e-10); "
                      f"max deposited / (initial/lambda0) {worst_dep:.4f} (<= 1); "
                      f"max backscatter fraction at eps <= 0.1 {worst_back:.1e} (< 1e-3)")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_moment_convergence(acceptance):
    t0 = time.perf_counter()
    tilted = PencilBeamSpec(StretchFrame(0.1, 2), stereo_lift(np.array([0.05])), Profile.constant(0.25),
                            Profile.constant(1.0))
    straight = PencilBeamSpec(StretchFrame(0.1, 2), north_pole(2), Profile.constant(0.25), Profile.constant(1.0))
    assert tilted.Theta[0] != 0.0
    cases, bad, worst = 0, [], 0.0
    for spec, theta_zero in ((tilted, False), (straight, True)):
        for l, m, p, q in itertools.product(range(3), repeat=4):
            if not moment_exponent_condition(l, m, p, q, theta_zero):
                continue
            cases += 1
            try:
                val, levels = moment_integral(spec, l, m, p, q, return_levels=True)
                change = abs(levels[-1] - levels[-2]) / abs(levels[-1])
            except NonConvergent:
                change = math.inf
            worst = max(worst, change)
            if not change < 0.01:
                bad.append((l, m, p, q, theta_zero))
    runtime = time.perf_counter() - t0
    ok = not bad and runtime < 300
    acceptance(6, ok, f"{cases} admissible (l, m, p, q); max final-halving change {worst:.2e} (< 1%); "
                      f"non-convergent {bad}; runtime {runtime:.0f}s (< 300s)")
    assert ok


# ---------------------------------------------------------------- 7

BUMP_SLOPE = 8.0 / (3.0 * math.sqrt(3.0))  # max |d/dr (1 - r^2)^2| on [0, 1]


def bump(r):
    return np.clip(1.0 - r * r, 0.0, None) ** 2


def make_test_function(rng):
    amp = rng.uniform(0.5, 2.0)
    cx, cv, ct = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.5, 2.5)
    rx, rv, rt = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.2)

    def psi(Xp, Xn, V):
        return amp * bump((Xp[..., 0] - cx) / rx) * bump((V[..., 0] - cv) / rv) * bump((Xn - ct) / rt)

    # gradient in (X', V) is bounded by amp * BUMP_SLOPE * |(1/rx, 1/rv)| because each bump is <= 1
    lip = amp * BUMP_SLOPE * math.hypot(1.0 / rx, 1.0 / rv)
    return psi, lip, (ct - rt, ct + rt)


def test_criterion_7_backward_lipschitz(acceptance):
    t0 = time.perf_counter()
    lam0 = 1.0
    spec = PencilBeamSpec(StretchFrame(0.1, 2), north_pole(2), Profile.constant(0.25), Profile.constant(lam0))
    rng = np.random.default_rng(77)
    coarse, fine = [], []
    for _ in range(5):
        psi, lip, support = make_test_function(rng)
        for _ in range(200):
            Xn = rng.uniform(0.1, support[1])
            z1 = rng.uniform(-2.5, 2.5, 2)
            z2 = z1 + rng.normal(scale=rng.choice([0.02, 0.2, 1.0]), size=2)
            dz = float(np.linalg.norm(z1 - z2))
            p1 = StretchedPoint([z1[0]], Xn, [z1[1]])
            p2 = StretchedPoint([z2[0]], Xn, [z2[1]])
            for out, kw in ((coarse, {}), (fine, {"n_gh": 48, "n_depth": 128})):
                w1 = backward_eval(spec, psi, p1, support, **kw)
                w2 = backward_eval(spec, psi, p2, support, **kw)
                out.append(abs(w1 - w2) / (lip * dz))
    coarse, fine = np.array(coarse), np.array(fine)
    bound = 1.0 / lam0 + 1.0 / lam0**2
    stability = abs(fine.max() - coarse.max()) / fine.max()
    runtime = time.perf_counter() - t0
    ok = coarse.max() <= bound and fine.max() <= bound and stability < 0.10 and runtime < 300
    acceptance(7, ok, f"1000 pairs: max quotient {coarse.max():.4f} default, {fine.max():.4f} refined "
                      f"(bound 1/lambda0 + 1/lambda0^2 = {bound:g}); change under refinement {stability:.2%} (< 10%); "
                      f"runtime {runtime:.0f}s (< 300s)")
    assert ok
