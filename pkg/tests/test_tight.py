import numpy as np
import pytest
from helpers import model_fd_jacobian, random_quat, rel_err

from imslam import eskf
from imslam.config import FilterConfig
from imslam.geometry import rotation_matrix
from imslam.gp_field import GpDomain, field_regressors, prior_covariance
from imslam.local_field import field_gradient, regressor
from imslam.mains import (
    NAV_BLOCKS,
    THETA_BLOCK,
    ArrayGeometry,
    InsFieldProcess,
    default_array,
    run_mains,
)
from imslam.sim import build_scenario
from imslam.tight import FusedArrayModel, position_jump_metric, run_tight_slam
from imslam.types import ImuSample, Trajectory

DOMAIN = GpDomain.build([3.0, 3.0, 1.5], 120, l_se=0.7)
G = 9.81


def tight_state(rng, domain=DOMAIN, P=None):
    nominal = {"p": rng.uniform(-1, 1, 3), "v": rng.standard_normal(3), "q": random_quat(rng),
               "ba": 0.05 * rng.standard_normal(3), "bg": 0.01 * rng.standard_normal(3),
               "theta": np.concatenate([rng.standard_normal(3) * 30, rng.standard_normal(5) * 10]),
               "eta": rng.standard_normal(domain.dim) * np.sqrt(prior_covariance(domain))}
    dim = 23 + domain.dim
    if P is None:
        P = np.eye(dim) * 0.01
        P[23:, 23:] = np.diag(prior_covariance(domain))
    blocks = list(NAV_BLOCKS) + [THETA_BLOCK, eskf.Block("eta", domain.dim)]
    return eskf.FilterState(blocks, nominal, P)


def test_center_sensor_reads_global_model():
    rng = np.random.default_rng(0)
    s = tight_state(rng)
    pos = np.vstack([np.zeros(3), default_array().positions])
    geo = ArrayGeometry(pos)
    y = FusedArrayModel(geo, DOMAIN, 0.5).predict(s).reshape(-1, 3)
    B = field_regressors(DOMAIN, s["p"])[0]
    np.testing.assert_allclose(y[0], rotation_matrix(s["q"]).T @ B @ s["eta"], atol=1e-12)


def test_theta_only_prediction():
    rng = np.random.default_rng(1)
    s = tight_state(rng)
    s.nominal["eta"] = np.zeros(DOMAIN.dim)
    geo = default_array()
    y = FusedArrayModel(geo, DOMAIN, 0.5).predict(s).reshape(-1, 3)
    np.testing.assert_allclose(y, geo.positions @ field_gradient(s["theta"]).T, atol=1e-12)


def test_dual_form_equality():
    rng = np.random.default_rng(2)
    geo = default_array()
    m = FusedArrayModel(geo, DOMAIN, 0.5)
    phi0 = regressor(np.zeros(3))
    for _ in range(50):
        s = tight_state(rng)
        B = field_regressors(DOMAIN, s["p"])[0]
        center = rotation_matrix(s["q"]).T @ B @ s["eta"]
        expanded = np.concatenate([center + (regressor(r) - phi0) @ s["theta"] for r in geo.positions])
        np.testing.assert_allclose(m.predict(s), expanded, atol=1e-11)


def test_fused_jacobian_matches_differences():
    rng = np.random.default_rng(3)
    m = FusedArrayModel(default_array(), DOMAIN, 0.5)
    for _ in range(20):
        s = tight_state(rng)
        assert rel_err(m.jacobian(s), model_fd_jacobian(s, m, 1e-6)) < 1e-4


def test_eta_covariance_constant_under_propagation():
    rng = np.random.default_rng(4)
    s = tight_state(rng)
    before = s.marginal("eta").copy()
    eta = s["eta"].copy()
    proc = InsFieldProcess()
    for _ in range(20):
        eskf.propagate(s, proc, ImuSample(0.0, rng.standard_normal(3) + [0, 0, G], rng.standard_normal(3)),
                       0.01)
    np.testing.assert_array_equal(s.marginal("eta"), before)
    np.testing.assert_array_equal(s["eta"], eta)


def test_propagation_matches_separate_navigation_filter():
    rng = np.random.default_rng(5)
    full = tight_state(rng)
    nav = eskf.FilterState(list(NAV_BLOCKS) + [THETA_BLOCK],
                           {k: full[k] for k in ("p", "v", "q", "ba", "bg", "theta")},
                           full.P[:23, :23].copy())
    proc = InsFieldProcess()
    for _ in range(20):
        u = ImuSample(0.0, rng.standard_normal(3) + [0, 0, G], rng.standard_normal(3))
        eskf.propagate(full, proc, u, 0.01)
        eskf.propagate(nav, proc, u, 0.01)
    np.testing.assert_allclose(full.P[:23, :23], nav.P, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(full.P[:23, 23:], 0.0)
    for k in ("p", "v", "q", "theta"):
        np.testing.assert_array_equal(full[k], nav[k])


def test_fused_update_never_inflates_map_covariance():
    rng = np.random.default_rng(6)
    geo = default_array()
    m = FusedArrayModel(geo, DOMAIN, 0.5)
    for _ in range(10):
        s = tight_state(rng)
        before = s.marginal("eta").copy()
        eskf.update(s, m, m.predict(s) + rng.standard_normal(3 * geo.n))
        assert np.linalg.eigvalsh(before - s.marginal("eta")).min() >= -1e-9


def test_static_zero_noise_is_fixed_point():
    rng = np.random.default_rng(7)
    s = tight_state(rng)
    s.nominal.update(v=np.zeros(3), q=np.array([1.0, 0, 0, 0]), ba=np.zeros(3), bg=np.zeros(3))
    before = s.copy()
    proc = InsFieldProcess(FilterConfig(sigma_acc=0, sigma_gyro=0, sigma_acc_bias=0, sigma_gyro_bias=0,
                                        q_field_mean=0, q_field_grad=0))
    for _ in range(100):
        eskf.propagate(s, proc, ImuSample(0.0, np.array([0, 0, G]), np.zeros(3)), 0.01)
    for k in ("p", "v", "q", "theta", "eta"):
        np.testing.assert_allclose(s[k], before[k], atol=1e-12)


@pytest.fixture(scope="module")
def loop60():
    geo = default_array()
    return geo, build_scenario("loop", 4, geo, duration=60.0)


def test_without_fused_epochs_equals_mains(loop60):
    geo, scen = loop60
    tight = run_tight_slam(scen.frames[:1500], geo, scen.world.domain, switch_period=10 ** 9)
    mains = run_mains(scen.frames[:1500], geo)
    a, b = tight.trajectory(), mains.trajectory()
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_array_equal(a.q, b.q)
    assert not a.fused.any()


def test_fused_every_frame_stays_stable(loop60):
    geo, scen = loop60
    f = run_tight_slam(scen.frames, geo, scen.world.domain, switch_period=1)
    tr = f.trajectory()
    assert tr.fused[1:].all()
    f.state.check_finite()
    assert np.linalg.eigvalsh(f.state.P).min() > -1e-8
    assert tr.cov_diag[:, :3].max() < 1.0
    prior = prior_covariance(scen.world.domain)
    assert np.trace(f.state.marginal("eta")) <= prior.sum()


def test_jump_metric_examples(loop60):
    n = 50
    still = Trajectory(np.arange(n) * 0.01, np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)),
                       np.zeros((n, 6)), np.zeros((n, 3)), np.arange(n) % 10 == 0)
    j = position_jump_metric(still)
    assert j["fused"]["max"] == 0.0 and j["ordinary"]["max"] == 0.0
    assert j["fused"]["count"] == 5 and j["ordinary"]["count"] == 45

    geo, scen = loop60
    dr = run_mains(scen.frames[:600], geo, use_mag=False, use_baro=False, use_fix=False)
    tr = dr.trajectory()
    tr.fused[::100] = True
    j = position_jump_metric(tr)
    for key in ("median", "mean", "max"):
        assert j["fused"][key] == j["ordinary"][key] == 0.0

    f = run_tight_slam(scen.frames, geo, scen.world.domain)
    j = position_jump_metric(f.trajectory())
    assert j["fused"]["count"] > 0
    assert j["fused"]["median"] >= j["ordinary"]["median"]
