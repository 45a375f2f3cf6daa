import json

import numpy as np
import pytest

from mmfa.dataio import (DEFAULT_CATEGORIES, CategorySpec, DefectSpec, generate_dataset,
                         import_precomputed_features, load_category_spec, load_manifest,
                         load_sample, read_feature_archive, render_sample, write_feature_archive)
from mmfa.errors import ConfigurationError, FormatError, SampleNotFoundError
from mmfa.grids import FeatureGrid

CATS = {c.name: c for c in DEFAULT_CATEGORIES}


def small_spec(name="dome"):
    return CategorySpec(name, shape=CATS[name].shape, image_size=(32, 32), radius_range=(2.0, 3.0))


def test_render_is_deterministic_in_seed():
    a, b = render_sample(CATS["tile"], 7), render_sample(CATS["tile"], 7)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.rgb, render_sample(CATS["tile"], 8).rgb)


def test_dent_differs_from_twin_only_inside_footprint():
    spec = CATS["dome"]
    twin = render_sample(spec, 11)
    rows, cols = np.nonzero(twin.fg_mask)
    centre = (int(np.median(cols)), int(np.median(rows)))
    dent = DefectSpec("geometric_dent", centre, 4.0, -0.05)
    s = render_sample(spec, 11, (dent,))
    assert s.label == "anomalous"
    changed = np.abs(s.points[..., 2] - twin.points[..., 2]) > 0
    assert changed.any() and not (changed & ~s.gt_mask).any()
    # a dent moves the surface away from the camera by exactly the profile
    expected = 0.05 * dent.profile(spec.image_size) * twin.fg_mask
    dz = s.points[..., 2] - twin.points[..., 2]
    np.testing.assert_allclose(dz[s.valid], expected[s.valid], atol=1e-12)
    np.testing.assert_array_equal(s.rgb, twin.rgb)


def test_color_blot_leaves_geometry_untouched():
    spec = CATS["ridge"]
    twin = render_sample(spec, 5)
    rows, cols = np.nonzero(twin.fg_mask)
    blot = DefectSpec("color_blot", (int(np.median(cols)), int(np.median(rows))), 3.0, 0.2, seed=1)
    s = render_sample(spec, 5, (blot,))
    np.testing.assert_array_equal(s.points, twin.points)
    assert not np.array_equal(s.rgb, twin.rgb)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        CategorySpec("x", shape="cube")
    with pytest.raises(ConfigurationError):
        CategorySpec("x", image_size=(8, 8))
    with pytest.raises(ConfigurationError):
        DefectSpec("scratch", (1, 1), 2.0, 0.1)
    with pytest.raises(ConfigurationError):
        DefectSpec("color_blot", (1, 1), 0.0, 0.1)


def test_generate_and_reload(tmp_path):
    spec = small_spec()
    train, test = generate_dataset(spec, 3, 2, 2, seed=4, root=tmp_path)
    assert len(train) == 3 and len(test) == 4
    assert sorted(test.labels.values()).count("anomalous") == 2
    assert load_manifest(tmp_path, "dome", "test").sample_ids == test.sample_ids
    assert load_category_spec(tmp_path, "dome") == spec
    for sid in test.sample_ids:
        s = load_sample(test, sid)
        assert s.image_size == (32, 32)
        assert (s.gt_mask is not None) == s.is_anomalous
        assert s.gt_mask is None or s.gt_mask.any()
    with pytest.raises(SampleNotFoundError):
        load_sample(test, "nope")


def test_generation_is_byte_identical(tmp_path):
    spec = small_spec("tile")
    generate_dataset(spec, 2, 1, 1, seed=9, root=tmp_path / "a")
    generate_dataset(spec, 2, 1, 1, seed=9, root=tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_rejects_empty_train(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_dataset(small_spec(), 0, 1, 1, seed=0, root=tmp_path)


def test_malformed_manifest(tmp_path):
    with pytest.raises(SampleNotFoundError):
        load_manifest(tmp_path, "dome", "train")
    (tmp_path / "dome").mkdir()
    (tmp_path / "dome" / "manifest.json").write_text(json.dumps({"splits": {}}))
    with pytest.raises(FormatError):
        load_manifest(tmp_path, "dome", "train")


def test_feature_archive_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    recs = []
    for sid in ("a", "b"):
        for mod in ("rgb", "point"):
            mask = rng.random(6) < 0.7
            recs.append((sid, FeatureGrid(mod, (2, 3), rng.normal(size=(6, 5)).astype(np.float32),
                                          mask)))
    path = tmp_path / "f.bin"
    write_feature_archive(recs, path)
    back = read_feature_archive(path)
    for (sid, g), (sid2, g2) in zip(recs, back):
        assert sid == sid2 and g.modality == g2.modality
        np.testing.assert_array_equal(g.features, g2.features)
        np.testing.assert_array_equal(g.mask, g2.mask)
    grids = import_precomputed_features(path)
    assert set(grids) == {"a", "b"} and set(grids["a"]) == {"rgb", "point"}

    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_feature_archive(path)
    write_feature_archive(recs[:1], path)
    with pytest.raises(FormatError):
        import_precomputed_features(path)
