"""Fast self-checks behind ``narrowbeam verify``.

Each check returns ``(passed, detail)``; the full suite lives in the test tree.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from .coefficients import CoefficientField, MomentTriple
from .fokker_planck_mc import SimConfig, simulate_occupation
from .geometry import Direction, StretchFrame, north_pole, normalize
from .harness import scaling_fit
from .pencil_beam import KernelParams, PencilBeamSpec, SourceAtom, h_kernel_eval, kernel_params, pencil_eval
from .wasserstein import bl_distance, bl_distance_flow


def _gauss_box(params: KernelParams, width: float = 12.0):
    # integrate over a box aligned with the Gaussian's own scales
    cov = np.linalg.inv(2.0 * np.array([[params.alpha, params.beta], [params.beta, params.gamma]]))
    sx, sv = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    val, _ = integrate.dblquad(lambda v, x: float(h_kernel_eval(params, [x], [v])), -width * sx, width * sx,
                               -width * sv, width * sv, epsabs=1e-12, epsrel=1e-10)
    return val


def check_kernel_mass():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(5):
        a = rng.uniform(0.2, 2.0)
        c = rng.uniform(0.2, 2.0)
        b = rng.uniform(-0.9, 0.9) * math.sqrt(a * c)
        m = MomentTriple(a, b, c, a * c - b * b, 1.0, 0.0)
        worst = max(worst, abs(_gauss_box(kernel_params(m, 2)) - 1.0))
    return worst < 1e-8, f"max |int H - 1| = {worst:.2e}"


def check_beam_mass():
    sigma = CoefficientField.constant(1.0, 2)
    lam = CoefficientField.constant(0.7, 2)
    spec = PencilBeamSpec.from_fields(StretchFrame(0.1, 2), north_pole(2), sigma, lam)
    worst = 0.0
    for depth in (0.3, 1.0, 2.5):
        a = 0.25 * depth
        sv = math.sqrt(2 * a)
        sx = math.sqrt(2 * a * depth**2 / 3)
        val, _ = integrate.dblquad(lambda v, x: float(pencil_eval(spec, np.array([x]), depth, np.array([v]))),
                                   -12 * sx, 12 * sx, -12 * sv, 12 * sv, epsabs=1e-13, epsrel=1e-10)
        worst = max(worst, abs(val - math.exp(-0.7 * depth)))
    return worst < 1e-8, f"max |mass - exp(-lambda Xn)| = {worst:.2e}"


def _random_measure(rng, k):
    x = rng.uniform(0.0, 1.0, (k, 2))
    th = normalize(rng.normal(size=(k, 2)))
    return x, th, rng.uniform(0.0, 1.0, k)


def check_solvers_agree():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(5):
        mu, nu = _random_measure(rng, 20), _random_measure(rng, 15)
        kappa = float(rng.uniform(0.5, 3.0))
        worst = max(worst, abs(bl_distance(mu, nu, kappa).value - bl_distance_flow(mu, nu, kappa).value))
    return worst < 1e-8, f"max |LP - flow| = {worst:.2e}"


def check_delta_pair():
    th = np.array([[0.0, 1.0]])
    worst = 0.0
    for d, kappa in ((0.1, 1.0), (5.0, 1.0), (0.3, 4.0)):
        r = bl_distance((np.zeros((1, 2)), th, [1.0]), (np.array([[d, 0.0]]), th, [1.0]), kappa)
        worst = max(worst, abs(r.value - min(2.0, kappa * d)))
    return worst < 1e-9, f"max |W - min(2, kappa d)| = {worst:.2e}"


def check_mc_mass():
    cfg = SimConfig(epsilon=0.1, dt=0.05, n_particles=4000, t_max=8.0, seed=3, deposit_stride=4)
    atom = SourceAtom(np.zeros(1), Direction(north_pole(2)), 1.0)
    cloud, diag = simulate_occupation(atom, CoefficientField.constant(1.0, 2), CoefficientField.constant(1.0, 2), cfg)
    res = abs(diag.budget_residual)
    ok = res < 1e-10 and cloud.mass <= 1.0 + 1e-12
    return ok, f"budget residual {res:.1e}, occupation mass {cloud.mass:.4f}"


def check_fit():
    eps = np.array([0.2, 0.1, 0.05])
    fit = scaling_fit(eps, eps**2, np.zeros(3))
    return abs(fit.slope - 2.0) < 1e-12, f"slope {fit.slope:.15f}"


CHECKS = [
    ("kernel normalization", check_kernel_mass),
    ("beam mass identity", check_beam_mass),
    ("LP and flow agree", check_solvers_agree),
    ("delta pair closed form", check_delta_pair),
    ("Monte Carlo mass budget", check_mc_mass),
    ("exact power-law fit", check_fit),
]


def run_checks(log=None) -> list:
    out = []
    for name, fn in CHECKS:
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        out.append({"name": name, "passed": bool(passed), "detail": detail})
        if log:
            log(f"{'ok' if passed else 'FAILED'}  {name}")
    return out
