import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detar import geom
from detar.geom import RigidTransform


def planted(rng, n=50, outlier_frac=0.0):
    r0 = geom.random_rotation(rng)
    t0 = rng.uniform(-1, 1, 3)
    x = rng.normal(size=(n, 3))
    y = x @ r0.T + t0
    w = np.ones(n)
    k = int(outlier_frac * n)
    if k:
        idx = rng.permutation(n)[:k]
        y[idx] = rng.normal(size=(k, 3)) * 2
        w[idx] = 0
    return x, y, w, r0, t0


def angle_rad(a, b):
    return np.radians(geom.rotation_error_iso(a, b))


def test_svd3_trivial_cases():
    s = geom.svd3(np.eye(3))
    assert np.array_equal(s.s, [1, 1, 1])
    assert np.array_equal(s.u, np.eye(3)) and np.array_equal(s.v, np.eye(3))
    np.testing.assert_allclose(geom.svd3(np.diag([3.0, 2.0, 1.0])).s, [3, 2, 1], rtol=0, atol=1e-15)
    np.testing.assert_allclose(geom.svd3(np.diag([1.0, 3.0, 2.0])).s, [3, 2, 1], rtol=0, atol=1e-15)


def test_svd3_random_reconstruction():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = rng.normal(size=(3, 3))
        s = geom.svd3(m)
        assert np.abs(s.u @ np.diag(s.s) @ s.v.T - m).max() < 1e-10
        assert np.abs(s.u.T @ s.u - np.eye(3)).max() < 1e-10
        assert np.abs(s.v.T @ s.v - np.eye(3)).max() < 1e-10
        assert np.all(np.diff(s.s) <= 0) and s.s[-1] >= 0


def test_svd3_rank_deficient_and_deterministic():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 1))
    m = a @ rng.normal(size=(1, 3))
    s = geom.svd3(m)
    assert np.abs(s.u @ np.diag(s.s) @ s.v.T - m).max() < 1e-10
    assert np.abs(s.u.T @ s.u - np.eye(3)).max() < 1e-10
    s2 = geom.svd3(m)
    assert np.array_equal(s.u, s2.u) and np.array_equal(s.s, s2.s)


def test_svd3_errors():
    with pytest.raises(ValueError):
        geom.svd3(np.array([[np.nan, 0, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(ValueError):
        geom.svd3(np.eye(2))


def test_procrustes_identity():
    x = np.random.default_rng(2).normal(size=(10, 3))
    np.testing.assert_allclose(geom.weighted_procrustes_rotation(x, x, np.ones(10)), np.eye(3), atol=1e-12)


@pytest.mark.parametrize("frac", [0.0, 0.5])
def test_procrustes_planted(frac):
    rng = np.random.default_rng(3)
    for _ in range(100):
        x, y, w, r0, t0 = planted(rng, outlier_frac=frac)
        r = geom.weighted_procrustes_rotation(x, y - t0, w)
        assert angle_rad(r, r0) < 1e-5
        assert geom.is_rotation(r)


@pytest.mark.parametrize("frac", [0.0, 0.5])
def test_kabsch_full_planted(frac):
    rng = np.random.default_rng(4)
    for _ in range(100):
        x, y, w, r0, t0 = planted(rng, outlier_frac=frac)
        tr = geom.weighted_kabsch_full(x, y, w)
        assert angle_rad(tr.r, r0) < 1e-5
        assert np.linalg.norm(tr.t - t0) < 1e-5


def test_kabsch_full_identity():
    x = np.random.default_rng(5).normal(size=(8, 3))
    tr = geom.weighted_kabsch_full(x, x)
    np.testing.assert_allclose(tr.r, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(tr.t, 0, atol=1e-12)


def test_procrustes_global_optimality():
    rng = np.random.default_rng(6)
    for _ in range(5):
        x = rng.normal(size=(20, 3))
        y = rng.normal(size=(20, 3))
        w = rng.random(20)
        r = geom.weighted_procrustes_rotation(x, y, w)

        def obj(rr):
            return float(np.sum(w * np.sum((x @ rr.T - y) ** 2, axis=1)))

        best = obj(r)
        for _ in range(1000):
            assert best <= obj(geom.random_rotation(rng)) + 1e-12


def test_kabsch_weight_scale_invariance():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    w = rng.random(30)
    a = geom.weighted_kabsch_full(x, y, w)
    for c in (1e-3, 7.0, 1e4):
        b = geom.weighted_kabsch_full(x, y, w * c)
        assert np.abs(a.r - b.r).max() < 1e-7 and np.abs(a.t - b.t).max() < 1e-7


def test_degenerate_configurations_raise():
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(geom.DegenerateError):
        geom.weighted_procrustes_rotation(line, line)
    with pytest.raises(geom.DegenerateError):
        geom.weighted_kabsch_full(line, line + 1)
    same = np.ones((5, 3))
    with pytest.raises(geom.DegenerateError):
        geom.weighted_kabsch_full(same, same)
    x = np.random.default_rng(8).normal(size=(5, 3))
    with pytest.raises(geom.DegenerateError):
        geom.weighted_kabsch_full(x, x, np.zeros(5))
    with pytest.raises(ValueError):
        geom.weighted_kabsch_full(x[:2], x[:2])


def test_three_point_sample_is_not_degenerate():
    rng = np.random.default_rng(9)
    x, y, _, r0, t0 = planted(rng, n=3)
    tr = geom.weighted_kabsch_full(x, y)
    assert angle_rad(tr.r, r0) < 1e-8


def test_kabsch_batch_matches_single():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(6, 4, 3))
    y = rng.normal(size=(6, 4, 3))
    r, t, bad = geom.kabsch_batch(x, y)
    assert not bad.any()
    for i in range(6):
        tr = geom.weighted_kabsch_full(x[i], y[i])
        np.testing.assert_allclose(r[i], tr.r, atol=1e-12)
        np.testing.assert_allclose(t[i], tr.t, atol=1e-12)


def test_rotation_error_examples():
    assert geom.rotation_error_iso(np.eye(3), np.eye(3)) == 0
    rz = geom.axis_angle_to_rotation([0, 0, np.radians(5)])
    assert abs(geom.rotation_error_iso(rz, np.eye(3)) - 5) < 1e-9
    rx = geom.axis_angle_to_rotation([np.pi, 0, 0])
    assert abs(geom.rotation_error_iso(rx, np.eye(3)) - 180) < 1e-6


def test_rotation_error_symmetry_and_left_invariance():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b, c = (geom.random_rotation(rng) for _ in range(3))
        e = geom.rotation_error_iso(a, b)
        assert abs(e - geom.rotation_error_iso(b, a)) < 1e-9
        assert abs(e - geom.rotation_error_iso(c @ a, c @ b)) < 1e-6


def test_translation_error():
    assert geom.translation_error_l2([1, 2, 3], [1, 2, 3]) == 0
    assert geom.translation_error_l2([1, 0, 0], [0, 0, 0]) == 1
    rng = np.random.default_rng(12)
    for _ in range(10):
        a, b = rng.normal(size=3), rng.normal(size=3)
        ref = np.sqrt(sum((a[i] - b[i]) ** 2 for i in range(3)))
        assert abs(geom.translation_error_l2(a, b) - ref) < 1e-12


def test_axis_angle():
    assert np.array_equal(geom.axis_angle_to_rotation([0, 0, 0]), np.eye(3))
    r = geom.axis_angle_to_rotation([0, 0, np.pi / 2])
    np.testing.assert_allclose(r, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    rng = np.random.default_rng(13)
    for _ in range(100):
        d = rng.normal(size=3)
        v = d / np.linalg.norm(d) * rng.uniform(0, np.pi * 0.999)
        r = geom.axis_angle_to_rotation(v)
        assert geom.is_rotation(r)
        assert abs(geom.rotation_error_iso(r, np.eye(3)) - np.degrees(np.linalg.norm(v))) < 1e-6
        back = geom.rotation_to_axis_angle(r)
        assert np.abs(geom.axis_angle_to_rotation(back) - r).max() < 1e-9


def test_rigid_transform_algebra():
    rng = np.random.default_rng(14)
    a = RigidTransform(geom.random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(geom.random_rotation(rng), rng.normal(size=3))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    np.testing.assert_allclose(a.matrix() @ np.append(p[0], 1), np.append(a.apply(p[:1])[0], 1), atol=1e-12)


def test_random_rotation_range():
    rng = np.random.default_rng(15)
    angles = [geom.rotation_error_iso(geom.random_rotation(rng, 45, 10), np.eye(3)) for _ in range(1000)]
    assert 10 - 1e-6 <= min(angles) and max(angles) <= 45 + 1e-6


def test_svd_counter_increments():
    before = geom.SVD_CALLS[0]
    geom.svd3(np.eye(3))
    geom.weighted_kabsch_full(np.eye(3), np.eye(3))
    assert geom.SVD_CALLS[0] == before + 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 40))
def test_procrustes_output_is_proper_rotation(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    try:
        r = geom.weighted_procrustes_rotation(x, y, rng.random(n))
    except geom.DegenerateError:
        return
    assert geom.is_rotation(r)


def test_rotation_error_matches_arccos_definition():
    rng = np.random.default_rng(16)
    for _ in range(200):
        a, b = geom.random_rotation(rng), geom.random_rotation(rng)
        c = np.clip((np.trace(b.T @ a) - 1) / 2, -1, 1)
        assert abs(geom.rotation_error_iso(a, b) - np.degrees(np.arccos(c))) < 1e-5
    e = geom.rotation_error_iso(np.eye(3) + 1e-8, np.eye(3))
    assert 0 <= e < 1e-5
