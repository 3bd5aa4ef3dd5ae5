import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from narrowbeam.ballistic import RayMeasureSpec, ray_measure_sample
from narrowbeam.coefficients import CoefficientField, Profile
from narrowbeam.errors import ConfigError, EmptyWindowError, StepTooLargeError
from narrowbeam.fokker_planck_mc import (
    SimConfig, SimDiagnostics, read_cloud, read_cloud_binary, read_cloud_csv, simulate_occupation, sphere_bm_step,
    stretched_stats, write_cloud_binary, write_cloud_csv, cloud_header,
)
from narrowbeam.geometry import Direction, StretchFrame, north_pole, normalize, stereo_lift
from narrowbeam.pencil_beam import SourceAtom

SIG1 = CoefficientField.constant(1.0, 2)
LAM1 = CoefficientField.constant(1.0, 2)


def atom(dim=2, v0=None, eps=0.1, anchor=None):
    d = north_pole(dim) if v0 is None else stereo_lift(eps * np.asarray(v0))
    return SourceAtom(np.zeros(dim - 1) if anchor is None else np.asarray(anchor, float), Direction(d), 1.0)


def run(eps=0.1, n=4000, dt=0.02, t_max=6.0, stride=5, mode="random", sigma=SIG1, lam=LAM1, dim=2, seed=1,
        source=None, **kw):
    cfg = SimConfig(epsilon=eps, dt=dt, n_particles=n, t_max=t_max, seed=seed, dim=dim, deposit_stride=stride,
                    deposit_mode=mode, **kw)
    return simulate_occupation(atom(dim) if source is None else source, sigma, lam, cfg)


# ---------------------------------------------------------------- sphere step

def test_sphere_step_zero_variance():
    rng = np.random.default_rng(0)
    th = normalize(rng.normal(size=(50, 3)))
    assert np.allclose(sphere_bm_step(th, 0.0, rng), th, atol=1e-15)
    th2 = normalize(rng.normal(size=(50, 2)))
    assert np.array_equal(sphere_bm_step(th2, 0.0, rng), th2)


@given(st.integers(2, 4), st.floats(0.0, 0.49), st.integers(0, 2**32 - 1))
def test_sphere_step_unit_norm(n, var, seed):
    rng = np.random.default_rng(seed)
    th = normalize(rng.normal(size=(20, n)))
    out = sphere_bm_step(th, var, rng)
    assert np.allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-14)


@pytest.mark.parametrize("n", [2, 3])
def test_sphere_step_mean_square_displacement(n):
    # |theta_out - theta_in|^2 = 2 (1 - cos r) with r^2 ~ variance chi^2_{n-1}
    var, N = 1e-4, 1_000_000
    rng = np.random.default_rng(17)
    th = np.tile(north_pole(n), (N, 1))
    d2 = np.sum((sphere_bm_step(th, var, rng) - th) ** 2, axis=-1)
    se = d2.std() / math.sqrt(N)
    assert abs(d2.mean() - (n - 1) * var) < 3 * se


def test_sphere_step_rejects_large_variance():
    with pytest.raises(StepTooLargeError):
        sphere_bm_step(north_pole(3)[None], 0.5, np.random.default_rng(0))


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(epsilon=-0.1, dt=0.01, n_particles=10, t_max=1.0, seed=0)
    with pytest.raises(ConfigError):
        SimConfig(epsilon=0.1, dt=0.0, n_particles=10, t_max=1.0, seed=0)
    with pytest.raises(ConfigError):
        SimConfig(epsilon=0.1, dt=0.01, n_particles=0, t_max=1.0, seed=0)
    with pytest.raises(ConfigError):
        SimConfig(epsilon=0.1, dt=0.01, n_particles=10, t_max=1.0, seed=0, deposit_mode="later")


def test_small_angle_step_limit():
    cfg = SimConfig(epsilon=1.0, dt=0.2, n_particles=10, t_max=1.0, seed=0)
    assert cfg.max_dt(2.0) == pytest.approx(0.05)
    with pytest.raises(ConfigError):
        simulate_occupation(atom(), CoefficientField.constant(2.0, 2), LAM1, cfg)


def test_config_hash_tracks_fields():
    a = SimConfig(epsilon=0.1, dt=0.01, n_particles=10, t_max=1.0, seed=0)
    b = SimConfig(epsilon=0.1, dt=0.01, n_particles=10, t_max=1.0, seed=1)
    assert a.config_hash() == SimConfig(**{**a.__dict__}).config_hash()
    assert a.config_hash() != b.config_hash()


# ---------------------------------------------------------------- zero diffusion

@pytest.mark.parametrize("dim", [2, 3])
def test_zero_epsilon_is_ray_measure(dim):
    dt, t_max = 0.05, 4.0
    eta = normalize(np.array([0.01] * (dim - 1) + [1.0]))
    src = SourceAtom(np.zeros(dim - 1), Direction(eta), 1.0)
    cloud, _ = run(eps=0.0, n=1, dt=dt, t_max=t_max, stride=1, mode="midpoint", dim=dim, source=src)
    ref = ray_measure_sample(RayMeasureSpec(np.zeros(dim - 1), Direction(eta), Profile.constant(1.0), dt, t_max))
    assert len(cloud) == len(ref)
    assert np.allclose(cloud.x, ref.x, rtol=0, atol=1e-12)
    assert np.allclose(cloud.theta, ref.theta, rtol=0, atol=1e-15)
    assert np.allclose(cloud.weights, ref.weights, rtol=1e-13)


def test_random_mode_deposits_exact_occupation_at_zero_epsilon():
    cloud, diag = run(eps=0.0, n=10, dt=0.05, t_max=30.0, stride=4)
    assert diag.deposited_mass == pytest.approx(-math.expm1(-30.0), rel=1e-12)
    assert diag.backscatter_mass == 0.0


def test_deposited_mass_tends_to_ray_mass():
    lam0 = 1.0
    masses = []
    for eps in (0.3, 0.1, 0.0):
        _, diag = run(eps=eps, n=2000, t_max=20.0, stride=50)
        masses.append(diag.deposited_mass)
    assert masses[-1] == pytest.approx(1 / lam0 * -math.expm1(-20.0), rel=1e-12)
    assert abs(masses[1] - masses[2]) <= abs(masses[0] - masses[2]) + 1e-12


# ---------------------------------------------------------------- budgets

@pytest.mark.parametrize("dim,lam", [(2, CoefficientField.constant(0.8, 2)), (2, CoefficientField.affine(0.5, 0.3, 2)),
                                     (3, CoefficientField.constant(1.0, 3)),
                                     (3, CoefficientField.bump(1.0, 0.5, [0.0, 0.0, 1.0], 0.5, 3))])
def test_weight_budget_closes(dim, lam):
    sig = CoefficientField.constant(1.0, dim)
    cloud, diag = run(eps=0.5, n=3000, t_max=5.0, dim=dim, sigma=sig, lam=lam, stride=3)
    assert abs(diag.budget_residual) < 1e-10
    assert diag.deposited_mass <= diag.initial_mass / lam.lower_bound
    assert diag.deposited_mass == pytest.approx(cloud.mass, rel=1e-12)
    assert min(diag.absorbed_mass, diag.backscatter_mass, diag.truncation_mass) >= 0.0


def test_constant_absorption_links_deposit_and_absorption():
    _, diag = run(eps=0.3, n=3000, lam=CoefficientField.constant(0.7, 2), t_max=5.0)
    assert 0.7 * diag.deposited_mass == pytest.approx(diag.absorbed_mass, rel=1e-12)


def test_backscatter_small_and_decreasing():
    back = []
    for eps in (1.0, 0.5, 0.2, 0.1):
        _, diag = run(eps=eps, n=20_000, dt=0.02 if eps < 0.5 else 0.01, t_max=8.0, stride=100)
        back.append(diag.backscatter_mass)
    assert all(b >= a for a, b in zip(back[1:], back[:-1]))
    assert back[0] > 0.0
    assert back[-1] < 1e-3


def test_diagnostics_merge():
    a = SimDiagnostics(1.0, 0.5, 0.2, 0.3, 0.5, 10, 20)
    b = SimDiagnostics(2.0, 1.0, 0.5, 0.5, 1.0, 5, 7)
    m = SimDiagnostics.merge([a, b])
    assert (m.initial_mass, m.n_particles, m.n_atoms) == (3.0, 15, 27)
    assert m.budget_residual == 0.0


def test_multi_atom_source_splits_particles():
    src = [atom(anchor=[-5.0]), SourceAtom(np.array([5.0]), Direction(north_pole(2)), 3.0)]
    cloud, diag = run(eps=0.1, n=4000, source=src, t_max=3.0)
    assert diag.initial_mass == pytest.approx(4.0, rel=1e-14)
    right = cloud.weights[cloud.x[:, 0] > 0].sum()
    # particles are allocated 1:3 and nothing exits, so the split is exact
    assert right / cloud.mass == pytest.approx(0.75, rel=1e-12)


# ---------------------------------------------------------------- determinism

def test_determinism_across_threads(monkeypatch):
    kw = dict(eps=0.2, n=5000, t_max=3.0, batch_size=1024)
    monkeypatch.setenv("NARROWBEAM_THREADS", "1")
    a, da = run(**kw)
    monkeypatch.setenv("NARROWBEAM_THREADS", "3")
    b, db = run(**kw)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.theta, b.theta) and np.array_equal(a.weights, b.weights)
    assert da.as_dict() == db.as_dict()


def test_general_kernel_fermi_limit_3d():
    eps = 0.05
    sig, lam = CoefficientField.constant(1.0, 3), CoefficientField.constant(1.0, 3)
    cloud, diag = run(eps=eps, n=30_000, dt=0.02, t_max=1.2, stride=1, dim=3, sigma=sig, lam=lam)
    assert abs(diag.budget_residual) < 1e-10
    stats = stretched_stats(cloud, StretchFrame(eps, 3), 1.0, 0.05)
    assert stats.var_V == pytest.approx(0.5, rel=0.10)
    assert stats.var_X == pytest.approx(0.5 / 3, rel=0.10)


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("NARROWBEAM_THREADS", "many")
    with pytest.raises(ConfigError):
        run(n=10)


def test_seed_changes_cloud():
    a, _ = run(n=500, seed=1)
    b, _ = run(n=500, seed=2)
    assert not np.array_equal(a.x, b.x)


# ---------------------------------------------------------------- statistics

def test_stretched_variance_matches_fermi_limit():
    eps = 0.05
    cloud, _ = run(eps=eps, n=100_000, dt=0.02, t_max=1.2, stride=1)
    stats = stretched_stats(cloud, StretchFrame(eps, 2), 1.0, 0.05)
    # sigma~ = sigma / 4, so Var V = 2 sigma~ depth
    assert stats.var_V == pytest.approx(2 * 0.25 * 1.0, rel=0.10)
    assert stats.cov_XV == pytest.approx(0.25 * 1.0, rel=0.10)
    assert stats.var_X == pytest.approx(2 * 0.25 / 3, rel=0.10)


def test_window_halving_stability():
    eps = 0.05
    cloud, _ = run(eps=eps, n=100_000, dt=0.02, t_max=1.5, stride=1)
    frame = StretchFrame(eps, 2)
    wide = stretched_stats(cloud, frame, 1.0, 0.1)
    narrow = stretched_stats(cloud, frame, 1.0, 0.05)
    assert narrow.var_V == pytest.approx(wide.var_V, rel=0.02)
    assert narrow.var_X == pytest.approx(wide.var_X, rel=0.02)


def test_dt_refinement_within_noise():
    eps = 0.1
    frame = StretchFrame(eps, 2)
    out = []
    for dt in (0.04, 0.02):
        cloud, _ = run(eps=eps, n=60_000, dt=dt, t_max=1.5, stride=1)
        out.append(stretched_stats(cloud, frame, 1.0, 0.1, return_errors=True))
    (a, ea), (b, eb) = out
    for f, i in (("var_X", 0), ("var_V", 1), ("cov_XV", 2)):
        assert abs(getattr(a, f) - getattr(b, f)) < 4 * math.hypot(ea[i], eb[i])


def test_stretched_stats_empty_window():
    cloud, _ = run(n=100, t_max=1.0)
    with pytest.raises(EmptyWindowError):
        stretched_stats(cloud, StretchFrame(0.1, 2), 5.0, 0.1)


# ---------------------------------------------------------------- files

@pytest.mark.parametrize("dim", [2, 3])
def test_cloud_file_round_trip(tmp_path, dim):
    cloud, _ = run(eps=0.3, n=200, t_max=2.0, dim=dim, sigma=CoefficientField.constant(1.0, dim),
                   lam=CoefficientField.constant(1.0, dim))
    cfg = SimConfig(epsilon=0.3, dt=0.02, n_particles=200, t_max=2.0, seed=1, dim=dim)
    head = cloud_header(cfg, {"model": "fp"})
    write_cloud_binary(tmp_path / "c.nbc", cloud, head)
    write_cloud_csv(tmp_path / "c.csv", cloud, head)
    for reader, name in ((read_cloud_binary, "c.nbc"), (read_cloud_csv, "c.csv"), (read_cloud, "c.nbc"),
                         (read_cloud, "c.csv")):
        back, h = reader(tmp_path / name)
        assert np.array_equal(back.x, cloud.x) and np.array_equal(back.theta, cloud.theta)
        assert np.array_equal(back.weights, cloud.weights)
        assert h["dim"] == dim and h["seed"] == 1 and h["config_hash"] == cfg.config_hash()


def test_binary_layout(tmp_path):
    cloud, _ = run(n=3, t_max=0.5)
    write_cloud_binary(tmp_path / "c.nbc", cloud, {"seed": 1})
    raw = (tmp_path / "c.nbc").read_bytes()
    assert raw[:8] == b"NBCLOUD1"
    hl = int.from_bytes(raw[8:12], "little")
    rec = np.frombuffer(raw[12 + hl:], dtype="<f8").reshape(-1, 5)
    assert np.array_equal(rec[:, 4], cloud.weights)


def test_reader_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTACLOUD" + b"\0" * 20)
    with pytest.raises(ValueError):
        read_cloud_binary(tmp_path / "x.bin")
