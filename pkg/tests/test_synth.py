import hashlib
import json

import numpy as np
import pytest

from unirit import geom, synth
from unirit.synth import PairSpec


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_tps_zero_offsets_is_identity():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(8, 3))
    w = synth.tps_fit(c, np.zeros((8, 3)))
    np.testing.assert_allclose(w.kernel_weights, 0, atol=1e-12)
    np.testing.assert_allclose(w.affine, np.hstack([np.eye(3), np.zeros((3, 1))]), atol=1e-12)
    x = rng.normal(size=(200, 3))
    np.testing.assert_allclose(w(x) - x, 0, atol=1e-12)


def test_tps_constant_offset_is_translation():
    rng = np.random.default_rng(1)
    c = rng.normal(size=(8, 3))
    v = np.array([1.5, -2.0, 0.25])
    w = synth.tps_fit(c, np.tile(v, (8, 1)))
    x = rng.normal(size=(100, 3)) * 3
    np.testing.assert_allclose(synth.tps_apply(w, x), x + v, atol=1e-10)


def test_tps_affine_offsets_give_pure_affine_warp():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(10, 3))
    A = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
    b = rng.normal(size=3)
    w = synth.tps_fit(c, c @ A.T + b - c)
    assert np.abs(w.kernel_weights).max() <= 1e-8
    np.testing.assert_allclose(w.affine[:, :3], A, atol=1e-10)
    np.testing.assert_allclose(w.affine[:, 3], b, atol=1e-10)
    x = rng.normal(size=(50, 3))
    np.testing.assert_allclose(w(x), x @ A.T + b, atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_tps_interpolates_control_points(seed):
    rng = np.random.default_rng(seed)
    c, off = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    w = synth.tps_fit(c, off)
    np.testing.assert_allclose(w(c), c + off, atol=1e-8)


def test_tps_smoothing_relaxes_interpolation():
    rng = np.random.default_rng(3)
    c, off = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    w = synth.tps_fit(c, off, lam=10.0)
    assert np.abs(w(c) - (c + off)).max() > 1e-3


def test_tps_rejects_bad_systems():
    with pytest.raises(ValueError):
        synth.tps_fit(np.eye(3), np.zeros((3, 3)))
    flat = np.column_stack([np.random.default_rng(4).normal(size=(8, 2)), np.zeros(8)])
    with pytest.raises(np.linalg.LinAlgError):
        synth.tps_fit(flat, np.zeros((8, 3)))
    with pytest.raises(ValueError):
        synth.tps_fit(np.random.default_rng(5).normal(size=(8, 3)), np.zeros((8, 3)), lam=-1)


@pytest.mark.parametrize("family", ["sphere", "ellipsoid", "blob", "torus"])
def test_base_shapes(family):
    x = synth.base_shape(family, 500, np.random.default_rng(6))
    assert x.shape == (500, 3)
    assert 0.3 < np.abs(x).max() <= 1.2
    with pytest.raises(ValueError):
        synth.base_shape("cube", 10, np.random.default_rng(0))


def test_ellipsoid_is_elongated():
    x = synth.base_shape("ellipsoid", 2000, np.random.default_rng(7))
    ext = x.max(axis=0) - x.min(axis=0)
    assert ext[0] > 1.5 * ext[1] and ext[1] > 1.3 * ext[2]


def test_case_a_no_deformation_is_identity():
    p = synth.make_pair(PairSpec(deform_mm=0, n_points=128))
    np.testing.assert_array_equal(p.source, p.target)
    np.testing.assert_array_equal(p.ground_truth, 0)


def test_case_a_deformation_magnitude():
    for seed in range(4):
        p = synth.make_pair(PairSpec(shape_family="blob", deform_mm=15, n_points=512, seed=seed))
        mag = np.linalg.norm(p.ground_truth, axis=1).mean()
        assert abs(mag - 15) <= 0.75
        # mean-centred field: centroids coincide
        np.testing.assert_allclose(p.source.mean(axis=0), p.target.mean(axis=0), atol=1e-9)


def test_ground_truth_maps_source_onto_target():
    p = synth.make_pair(PairSpec(case="B", seed=3, n_points=256))
    np.testing.assert_allclose(geom.apply_displacement(p.source, p.ground_truth), p.target, atol=1e-12)


def test_case_b_rotation_recovered_by_procrustes():
    axis = np.array([0.0, 1.0, 1.0])
    spec = PairSpec(case="B", deform_mm=0, rotation_range_deg=(45, 45), translation_range=(0, 0),
                    axis=tuple(axis), n_points=300, seed=8)
    p = synth.make_pair(spec)
    xf = geom.procrustes(p.target, p.source)
    np.testing.assert_allclose(xf.rotation, geom.rotation_about_axis(axis, np.radians(45)), atol=1e-6)
    np.testing.assert_allclose(p.rotation, xf.rotation, atol=1e-6)


def test_case_b_translation_within_range():
    half = 100.0
    for seed in range(10):
        p = synth.make_pair(PairSpec(case="B", deform_mm=0, seed=seed, n_points=64))
        offset = p.source.mean(axis=0) - p.target.mean(axis=0)
        assert np.all(np.abs(offset) <= 0.2 * half + 1e-9)
        np.testing.assert_allclose(offset, p.translation, atol=1e-9)
        assert geom.rotation_angle_deg(p.rotation) <= 45 + 1e-9


def test_noise_and_dropout():
    clean = synth.make_pair(PairSpec(seed=4, n_points=200))
    noisy = synth.make_pair(PairSpec(seed=4, n_points=200, noise_sigma=1.0))
    d = noisy.source - clean.source
    assert 0.8 < d.std() < 1.2
    np.testing.assert_array_equal(noisy.target, clean.target)
    dropped = synth.make_pair(PairSpec(seed=4, n_points=200, dropout_fraction=0.25))
    assert dropped.source.shape == (150, 3)
    assert dropped.ground_truth is None and not dropped.has_correspondence


def test_spec_validation():
    for bad in [dict(case="C"), dict(dropout_fraction=1.0), dict(rotation_range_deg=(10, -10)),
                dict(deform_mm=-1), dict(shape_family="cube"), dict(n_points=0),
                dict(shape_family="from_file")]:
        with pytest.raises(ValueError):
            PairSpec(**bad)


def test_from_file_family(tmp_path):
    path = tmp_path / "shape.xyz"
    geom.write_cloud(path, synth.base_shape("torus", 400, np.random.default_rng(1)) * 50)
    p = synth.make_pair(PairSpec(shape_family="from_file", path=str(path), n_points=300))
    assert p.target.shape == (300, 3)


def test_subsample():
    x = np.random.default_rng(9).normal(size=(20, 3))
    full = synth.subsample(x, 20, seed=1)
    assert sorted(map(tuple, full)) == sorted(map(tuple, x))
    one = synth.subsample(x, 1, seed=2)
    assert any(np.array_equal(one[0], r) for r in x)
    np.testing.assert_array_equal(synth.subsample(x, 5, 3), synth.subsample(x, 5, 3))
    with pytest.raises(ValueError):
        synth.subsample(x, 21, 0)


def test_dataset_round_trip_and_determinism(tmp_path):
    specs = [PairSpec(shape_family=f, n_points=64, seed=i, case="B" if i % 2 else "A")
             for i, f in enumerate(["sphere", "blob", "ellipsoid"])]
    pairs = [synth.make_pair(s) for s in specs]
    records = synth.write_dataset(pairs, tmp_path / "a" / "manifest.json", tmp_path / "a")
    assert len(records) == 3
    assert set(records[0]) >= {"id", "source_path", "target_path", "case", "deform_mm", "seed",
                               "has_correspondence"}
    for (rec, src, tgt), pair in zip(synth.load_pairs(tmp_path / "a" / "manifest.json"), pairs):
        np.testing.assert_array_equal(src, pair.source)
        np.testing.assert_array_equal(tgt, pair.target)
    synth.write_dataset([synth.make_pair(s) for s in specs], tmp_path / "b" / "manifest.json", tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest[1]["source_path"] == "pair_00001_source.xyz"
    with pytest.raises(ValueError):
        synth.write_dataset([], tmp_path / "c.json", tmp_path)
