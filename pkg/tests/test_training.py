"""Adaptation loop and inference scoring on small random feature grids."""
import json
import math

import numpy as np
import pytest
import torch

from mmfa.errors import ConfigurationError
from mmfa.fusion import SampleFeatures
from mmfa.grids import FeatureGrid
from mmfa.scorer import (build_inference_banks, default_sigma, fill_from_nearest, load_map,
                         save_map, score_dataset, score_sample)
from mmfa.trainer import (TrainConfig, Trainer, few_shot_subsample, lr_schedule, parse_losses,
                          train_lsfa)


def toy_features(n, seed=0, grid=(3, 3), d=8, image=(12, 12)):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = rng.random(grid[0] * grid[1]) < 0.8
        mask[0] = True
        fg = np.ones(image, bool)
        mk = lambda mod: FeatureGrid(mod, grid, rng.normal(size=(grid[0] * grid[1], d)).astype(  # noqa: E731
            np.float32), mask.copy(), patch_size=image[0] // grid[0], sample_id=f"s{i:02d}")
        out.append(SampleFeatures(f"s{i:02d}", mk("rgb"), mk("point"), fg))
    return out


def small_cfg(**kw):
    base = dict(batch_size=4, epochs=2, warmup_steps=2, n_heads=2, proj_dim=16,
                local_bank_size=200, global_bank_size=32)
    base.update(kw)
    return TrainConfig(**base)


# --- schedule and config ----------------------------------------------------

def test_lr_schedule_shape():
    cfg = TrainConfig(lr=1.0, warmup_steps=4)
    assert lr_schedule(0, cfg, 20) == 0.0
    assert lr_schedule(2, cfg, 20) == 0.5
    assert lr_schedule(4, cfg, 20) == 1.0
    assert lr_schedule(12, cfg, 20) == pytest.approx(0.5, abs=1e-15)
    assert lr_schedule(20, cfg, 20) == pytest.approx(0.0, abs=1e-15)
    vals = [lr_schedule(s, cfg, 20) for s in range(4, 21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_parse_losses():
    assert parse_losses("full") == ("la", "ga", "lc", "gc")
    assert parse_losses("ifc") == ("lc", "gc")
    assert parse_losses("clc") == ("la", "ga")
    assert parse_losses("none") == ()
    assert parse_losses("gc, la") == ("la", "gc")
    with pytest.raises(ConfigurationError):
        parse_losses("la,xyz")
    with pytest.raises(ConfigurationError):
        TrainConfig(update_mode="parallel")
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)


# --- optimisation -----------------------------------------------------------

def test_descent_with_frozen_banks():
    feats = toy_features(4, seed=1)
    tr = Trainer(feats, small_cfg(lr=1e-4))
    tr.init_banks()
    # each step reports the objective before its own update
    losses = [tr.step([0, 1, 2, 3], 1e-4, update_banks=False).report().l_lsfa for _ in range(6)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_lambda_zero_matches_ifc_only():
    feats = toy_features(6, seed=2)
    a = train_lsfa(feats, small_cfg(lam=0.0, losses="full"))
    b = train_lsfa(feats, small_cfg(losses="ifc"))
    for m in ("rgb", "point"):
        for (na, pa), (nb, pb) in zip(a.adaptors[m].named_parameters(),
                                      b.adaptors[m].named_parameters()):
            if not na.startswith("head"):
                assert torch.allclose(pa, pb, atol=1e-12), na


def test_training_is_deterministic(tmp_path):
    feats = toy_features(6, seed=3)
    train_lsfa(feats, small_cfg(), out_dir=tmp_path / "a")
    train_lsfa(feats, small_cfg(), out_dir=tmp_path / "b")
    for name in ("train_log.jsonl", "adaptors.bin", "ckpt_epoch1.bin", "ckpt_epoch2.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rec = json.loads((tmp_path / "a" / "train_log.jsonl").read_text().splitlines()[0])
    assert "wall_time" not in rec and rec["step"] == 1


def test_sequential_mode_runs_three_updates():
    feats = toy_features(4, seed=4)
    res = train_lsfa(feats, small_cfg(update_mode="sequential", epochs=1))
    assert len(res.log) == 1 and math.isfinite(res.log[0].losses["l_lsfa"])


def test_bank_sizes_grow_and_are_bounded():
    feats = toy_features(8, seed=5)
    res = train_lsfa(feats, small_cfg(global_bank_size=10, epochs=3))
    sizes = [r.bank_sizes["rgb_global"] for r in res.log]
    assert sizes[-1] == 10 and max(sizes) <= 10


def test_none_preset_keeps_identity():
    feats = toy_features(4, seed=6)
    res = train_lsfa(feats, small_cfg(losses="none"))
    assert res.log == []
    x = torch.tensor(feats[0].rgb.features, dtype=torch.float64)
    assert torch.equal(res.adaptors.rgb(x), x)


def test_few_shot_subsample(tmp_path):
    from mmfa.dataio import DatasetManifest
    m = DatasetManifest(root=tmp_path, category="c", split="train",
                        sample_ids=[f"t{i}" for i in range(10)], seed=0, image_size=(32, 32),
                        labels={f"t{i}": "normal" for i in range(10)})
    a = few_shot_subsample(m, 5, seed=1)
    assert len(a) == 5 and a.sample_ids == sorted(a.sample_ids)
    assert a.sample_ids == few_shot_subsample(m, 5, seed=1).sample_ids
    assert few_shot_subsample(m, 10) is m
    with pytest.raises(ConfigurationError):
        few_shot_subsample(m, 11)


# --- scoring ----------------------------------------------------------------

def test_training_sample_scores_zero_with_full_bank():
    feats = toy_features(3, seed=7)
    banks = build_inference_banks(feats, None, 1.0)
    r = score_sample(feats[0], None, banks)
    assert r.image_score_fused == 0.0 and not r.pixel_map_fused.any()


def test_fused_map_is_modality_mean():
    train, test = toy_features(4, seed=8), toy_features(2, seed=9)
    banks = build_inference_banks(train, None, 0.5)
    r = score_sample(test[0], None, banks)
    np.testing.assert_allclose(r.pixel_map_fused, 0.5 * (r.pixel_map_rgb + r.pixel_map_pt))
    assert r.image_score_fused == r.pixel_map_fused.max() > 0


def test_farther_features_score_higher():
    train = toy_features(4, seed=10)
    banks = build_inference_banks(train, None, 1.0)
    probe = toy_features(1, seed=10)[0]
    base = score_sample(probe, None, banks).image_score_fused
    probe.rgb.features = probe.rgb.features + 3.0
    assert score_sample(probe, None, banks).image_score_fused > base


def test_fill_from_nearest():
    s = np.array([1.0, 0, 0, 0, 0, 0, 0, 0, 5.0])
    known = np.zeros(9, bool)
    known[[0, 8]] = True
    out = fill_from_nearest(s, known, (3, 3))
    assert out.reshape(3, 3).tolist() == [[1, 1, 1], [1, 1, 5], [1, 5, 5]]
    assert not fill_from_nearest(s, np.zeros(9, bool), (3, 3)).any()


def test_default_sigma():
    assert default_sigma((224, 224)) == 4.0
    assert default_sigma((64, 32)) == pytest.approx(64 * 4 / 224)


def test_results_roundtrip(tmp_path):
    train, test = toy_features(3, seed=11), toy_features(2, seed=12)
    banks = build_inference_banks(train, None, 1.0)
    res = score_dataset(test, None, banks, labels={"s00": "normal", "s01": "anomalous"},
                        out_dir=tmp_path, category="toy")
    lines = (tmp_path / "results.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == {"format": "mmfa-results/1", "category": "toy", "n": 2}
    rec = json.loads(lines[2])
    assert rec["label"] == "anomalous" and rec["image_score_fused"] == res[1].image_score_fused
    back = load_map(tmp_path / rec["map"])
    m = res[1].pixel_map_fused
    assert np.abs(back - m).max() <= (m.max() - m.min()) / 65535 + 1e-12
    save_map(np.full((3, 3), 2.5), tmp_path / "flat.png")
    assert (load_map(tmp_path / "flat.png") == 2.5).all()


def test_banks_reject_bad_fraction():
    with pytest.raises(ConfigurationError):
        build_inference_banks(toy_features(2), None, 0.0)
    with pytest.raises(ConfigurationError):
        build_inference_banks([], None, 0.5)
