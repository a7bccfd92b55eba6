import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imslam.geometry import quat_from_euler
from imslam.metrics import NoOverlap, compute_metrics


def straight(n=11):
    t = np.linspace(0.0, 1.0, n)
    p = np.column_stack([t, 2 * t, np.zeros(n)])
    q = np.tile(quat_from_euler(0.0, 0.0, 0.3), (n, 1))
    return t, p, q


def test_identical_trajectories_have_zero_error():
    t, p, q = straight()
    r = compute_metrics(t, p, q, t, p, q)
    assert r.horizontal == r.vertical == r.yaw_deg == 0.0
    assert np.all(r.horizontal_series == 0.0)


def test_three_four_five():
    t, p, q = straight()
    r = compute_metrics(t, p + [3.0, 4.0, 0.0], q, t, p, q)
    assert r.horizontal == pytest.approx(5.0)
    assert r.vertical == 0.0
    r = compute_metrics(t, p + [0.0, 0.0, -2.0], q, t, p, q)
    assert r.vertical == pytest.approx(2.0) and r.horizontal == 0.0


def test_yaw_wraps():
    t = np.array([0.0, 1.0])
    p = np.zeros((2, 3))
    truth = np.tile(quat_from_euler(0.0, 0.0, math.radians(179.0)), (2, 1))
    est = np.tile(quat_from_euler(0.0, 0.0, math.radians(-179.0)), (2, 1))
    r = compute_metrics(t, p, est, t, p, truth)
    assert r.yaw_deg == pytest.approx(2.0, abs=1e-9)


def test_truth_interpolated_at_estimate_epochs():
    t, p, q = straight(11)
    te = np.array([0.05, 0.55, 0.95])
    pe = np.column_stack([te, 2 * te, np.zeros(3)])
    r = compute_metrics(te, pe, q[:3], t, p, q)
    assert r.horizontal == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(r.t, te)


def test_no_overlap():
    t, p, q = straight()
    with pytest.raises(NoOverlap):
        compute_metrics(t + 5.0, p, q, t, p, q)
    with pytest.raises(NoOverlap):
        compute_metrics(t[:0], p[:0], q[:0], t, p, q)


def test_report_json_is_stable():
    t, p, q = straight()
    a = compute_metrics(t, p + 0.1, q, t, p, q, "abc", {"system": "tight", "seed": 1})
    b = compute_metrics(t, p + 0.1, q, t, p, q, "abc", {"seed": 1, "system": "tight"})
    assert a.to_json() == b.to_json()
    assert '"fingerprint": "abc"' in a.to_json(series=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_self_comparison_is_zero(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    t = np.cumsum(rng.uniform(0.01, 0.5, n))
    p = rng.standard_normal((n, 3)) * 10
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    r = compute_metrics(t, p, q, t, p, q)
    assert r.horizontal == 0.0 and r.vertical == 0.0
    assert r.yaw_deg < 1e-6
    assert np.all(r.yaw_series_deg >= 0.0)
