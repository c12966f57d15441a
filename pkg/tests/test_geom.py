import numpy as np
import pytest

from unirit import geom
from unirit.geom import RigidTransform


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=2)


def test_identity_is_bitwise():
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(geom.apply_rigid(x, RigidTransform.identity()), x)


def test_quarter_turn_about_z():
    xf = RigidTransform(geom.rotation_about_axis([0, 0, 1], np.pi / 2), [0, 0, 1])
    np.testing.assert_allclose(geom.apply_rigid([[1, 0, 0]], xf), [[0, 1, 1]], atol=1e-15)


def test_rigid_preserves_distances():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 3))
    y = geom.apply_rigid(x, RigidTransform(random_rotation(rng), rng.normal(size=3)))
    np.testing.assert_allclose(pairwise(y), pairwise(x), rtol=1e-9, atol=1e-12)


def test_rigid_transform_rejects_reflection_and_skew():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3), [np.nan, 0, 0])


def test_apply_rigid_rejects_non_finite():
    with pytest.raises(ValueError):
        geom.apply_rigid([[np.inf, 0, 0]], RigidTransform.identity())


def test_compose_matches_sequential_application():
    rng = np.random.default_rng(2)
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    b = RigidTransform(random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(20, 3))
    np.testing.assert_allclose(geom.apply_rigid(geom.apply_rigid(x, a), b),
                               geom.apply_rigid(x, geom.compose(b, a)), atol=1e-12)
    np.testing.assert_allclose(geom.apply_rigid(x, geom.compose_all([a, b])),
                               geom.apply_rigid(x, geom.compose(b, a)), atol=1e-12)


def test_inverse_round_trip():
    rng = np.random.default_rng(3)
    a = RigidTransform(random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(geom.apply_rigid(geom.apply_rigid(x, a), a.inverse()), x, atol=1e-12)


def test_displacement_examples():
    x = np.random.default_rng(4).normal(size=(6, 3))
    np.testing.assert_array_equal(geom.apply_displacement(x, np.zeros((6, 3))), x)
    np.testing.assert_array_equal(geom.apply_displacement([[0, 0, 0]], [[1, 2, 3]]), [[1, 2, 3]])
    with pytest.raises(ValueError):
        geom.apply_displacement(x, np.zeros((5, 3)))


def test_rigid_as_displacement_field():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(12, 3))
    xf = RigidTransform(random_rotation(rng), rng.normal(size=3))
    moved = geom.apply_rigid(x, xf)
    np.testing.assert_allclose(geom.apply_displacement(x, moved - x), moved, atol=1e-14)


def test_centroid():
    np.testing.assert_array_equal(geom.centroid([[0, 0, 0], [2, 0, 0]]), [1, 0, 0])
    np.testing.assert_array_equal(geom.centroid([[1.5, -2, 3]]), [1.5, -2, 3])
    x = np.random.default_rng(6).uniform(size=(100, 3))
    oracle = [sum(float(p[k]) for p in x) / 100 for k in range(3)]
    np.testing.assert_allclose(geom.centroid(x), oracle, atol=1e-12)


def test_normalize_examples():
    out, scale, offset = geom.normalize([[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(out, [[-1, 0, 0], [1, 0, 0]])
    assert scale == 1.0
    np.testing.assert_array_equal(offset, 0)

    out, scale, offset = geom.normalize([[0, 0, 0], [4, 0, 0]])
    np.testing.assert_array_equal(out, [[-1, 0, 0], [1, 0, 0]])
    assert scale == 2.0
    np.testing.assert_array_equal(offset, [2, 0, 0])


def test_normalize_round_trip_and_range():
    x = np.random.default_rng(7).normal(size=(50, 3)) * 30 + 5
    out, scale, offset = geom.normalize(x)
    assert np.isclose(np.abs(out).max(), 1.0)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-15)
    np.testing.assert_allclose(geom.denormalize(out, scale, offset), x, atol=1e-12)


def test_joint_normalize_uses_concatenation():
    a = np.array([[0.0, 0, 0], [2, 0, 0]])
    b = np.array([[10.0, 0, 0], [12, 0, 0]])
    na, nb, scale, offset = geom.normalize(a, b)
    np.testing.assert_array_equal(offset, [6, 0, 0])
    assert scale == 6.0
    np.testing.assert_array_equal(na[:, 0], [-1, -2 / 3])
    np.testing.assert_array_equal(nb[:, 0], [2 / 3, 1])


def test_normalize_degenerate():
    with pytest.raises(ValueError):
        geom.normalize([[1, 1, 1], [1, 1, 1]])
    with pytest.raises(ValueError):
        geom.normalize([[1, 1, 1]])


def test_procrustes_recovers_transform():
    rng = np.random.default_rng(8)
    xf = RigidTransform(random_rotation(rng), rng.normal(size=3))
    x = rng.normal(size=(30, 3))
    est = geom.procrustes(x, geom.apply_rigid(x, xf))
    np.testing.assert_allclose(est.rotation, xf.rotation, atol=1e-10)
    np.testing.assert_allclose(est.translation, xf.translation, atol=1e-10)


def test_rotation_angle():
    R = geom.rotation_about_axis([1, 1, 0], np.radians(30))
    assert geom.rotation_angle_deg(R) == pytest.approx(30.0, abs=1e-10)


def test_cloud_file_round_trip(tmp_path):
    x = np.random.default_rng(9).normal(size=(15, 3)) * 123.456
    path = tmp_path / "c.xyz"
    geom.write_cloud(path, x, header="made in a test\nsecond line")
    np.testing.assert_array_equal(geom.read_cloud(path), x)
    assert path.read_text().startswith("# made in a test\n# second line\n")


def test_read_cloud_skips_comments_and_rejects_bad_rows(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# header\n1 2 3\n\n  4 5 6  \n")
    np.testing.assert_array_equal(geom.read_cloud(p), [[1, 2, 3], [4, 5, 6]])
    p.write_text("1 2\n")
    with pytest.raises(ValueError):
        geom.read_cloud(p)


def test_as_cloud_validation():
    with pytest.raises(ValueError):
        geom.as_cloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        geom.as_cloud(np.zeros((0, 3)))
    c = geom.as_cloud([[1, 2, 3]])
    assert not c.flags.writeable
