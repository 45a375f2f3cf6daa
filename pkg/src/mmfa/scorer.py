"""Inference: coreset banks of adapted train features, nearest-neighbour patch
scores, pixel maps and modality fusion.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .adaptor import AdaptorPair, adapt
from .banks import CoresetBank, coreset_select
from .errors import ConfigurationError, ContractError
from .fusion import SampleFeatures
from .grids import MODALITIES

RESULTS_FORMAT = "mmfa-results/1"


@dataclass
class AnomalyResult:
    sample_id: str
    pixel_map_rgb: np.ndarray
    pixel_map_pt: np.ndarray
    pixel_map_fused: np.ndarray
    image_score_fused: float
    image_score_rgb: float
    image_score_pt: float
    label: str | None = None


def default_sigma(image_size) -> float:
    """4 px at 224 resolution, scaled with the image side."""
    return 4.0 * max(image_size) / 224.0


def _as_f32(x: np.ndarray) -> np.ndarray:
    # queries are rounded like the stored float32 banks so identical inputs give 0 distance
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def adapted_features(sf: SampleFeatures, adaptors: AdaptorPair | None, modality: str) -> np.ndarray:
    grid = getattr(sf, modality)
    if adaptors is None:
        return _as_f32(grid.features)
    with torch.no_grad():
        out = adapt(grid, adaptors[modality])
    return _as_f32(out.numpy())


def build_inference_banks(train: list[SampleFeatures], adaptors: AdaptorPair | None,
                          coreset_fraction: float = 0.1) -> dict[str, CoresetBank]:
    """Per-modality coreset over the adapted local features of every train sample."""
    if not 0 < coreset_fraction <= 1:
        raise ConfigurationError("coreset_fraction must lie in (0, 1]")
    if not train:
        raise ConfigurationError("empty training feature pool")
    banks = {}
    for modality in MODALITIES:
        pool = np.concatenate([adapted_features(sf, adaptors, modality)[getattr(sf, modality).mask]
                               for sf in train])
        if len(pool) == 0:
            raise ConfigurationError(f"no {modality} features to build a bank from")
        m = max(1, math.ceil(coreset_fraction * len(pool)))
        banks[modality] = coreset_select(pool, m)
    return banks


def fill_from_nearest(scores: np.ndarray, known: np.ndarray, grid_shape) -> np.ndarray:
    """Give every unknown grid cell the score of the nearest known cell (ties: lower index)."""
    g_h, g_w = grid_shape
    scores = np.asarray(scores, dtype=np.float64).copy()
    if not known.any():
        return np.zeros_like(scores)
    if known.all():
        return scores
    rc = np.stack(np.unravel_index(np.arange(g_h * g_w), (g_h, g_w)), axis=1)
    k_idx = np.nonzero(known)[0]
    for i in np.nonzero(~known)[0]:
        d2 = ((rc[k_idx] - rc[i]) ** 2).sum(axis=1)
        scores[i] = scores[k_idx[np.argmin(d2)]]
    return scores


def upsample(patch_scores: np.ndarray, grid_shape, image_size, sigma: float) -> np.ndarray:
    """Bilinear (half-pixel aligned) upsampling then Gaussian smoothing."""
    t = torch.as_tensor(patch_scores.reshape(1, 1, *grid_shape), dtype=torch.float64)
    up = torch.nn.functional.interpolate(t, size=tuple(image_size), mode="bilinear",
                                         align_corners=False)[0, 0].numpy()
    if sigma > 0:
        up = ndimage.gaussian_filter(up, sigma=sigma, mode="nearest", truncate=4.0)
    return up


def patch_scores(sf: SampleFeatures, adaptors, banks, modality: str) -> np.ndarray:
    grid = getattr(sf, modality)
    bank = banks[modality]
    if grid.dim != bank.dim:
        raise ContractError(f"{modality} features have D={grid.dim}, bank has D={bank.dim}")
    feats = adapted_features(sf, adaptors, modality)
    scores = np.zeros(grid.n_patches)
    if grid.mask.any():
        scores[grid.mask] = bank.distances(feats[grid.mask])
    return fill_from_nearest(scores, grid.mask, grid.grid_shape)


def score_sample(sf: SampleFeatures, adaptors: AdaptorPair | None, banks: dict,
                 smoothing_sigma: float | None = None, image_size=None,
                 label: str | None = None) -> AnomalyResult:
    """Pixel-level anomaly maps for one sample.

    ``image_size`` defaults to the RANSAC foreground's shape; background
    pixels (outside that foreground) are set to 0.
    """
    if image_size is None:
        if sf.fg is None:
            raise ConfigurationError("image_size required for features without a foreground mask")
        image_size = sf.fg.shape
    sigma = default_sigma(image_size) if smoothing_sigma is None else smoothing_sigma
    maps = {}
    for modality in MODALITIES:
        grid = getattr(sf, modality)
        m = upsample(patch_scores(sf, adaptors, banks, modality), grid.grid_shape, image_size, sigma)
        if sf.fg is not None:
            m = np.where(sf.fg, m, 0.0)
        maps[modality] = np.maximum(m, 0.0)
    fused = 0.5 * (maps["rgb"] + maps["point"])
    return AnomalyResult(sf.sample_id, maps["rgb"], maps["point"], fused,
                         float(fused.max()), float(maps["rgb"].max()), float(maps["point"].max()),
                         label)


# ---------------------------------------------------------------------------
# results file
#
# results.jsonl: first line is a header record {"format", "category", "n"},
# then one record per sample sorted by sample_id:
#   {"sample_id", "label", "image_score_fused", "image_score_rgb",
#    "image_score_pt", "map": "maps/<id>_fused.png", ...}
# Each map is a 16-bit grayscale PNG with a "<name>.json" sidecar holding
# {"min", "max"}; value = min + png / 65535 * (max - min).


def save_map(array: np.ndarray, path: Path):
    lo, hi = float(array.min()), float(array.max())
    q = np.zeros(array.shape, dtype=np.uint16) if hi <= lo else \
        np.round((array - lo) / (hi - lo) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")
    Path(str(path)[:-4] + ".json").write_text(json.dumps({"min": lo, "max": hi}) + "\n")


def load_map(path: Path) -> np.ndarray:
    path = Path(path)
    scale = json.loads(Path(str(path)[:-4] + ".json").read_text())
    with Image.open(path) as im:
        q = np.asarray(im, dtype=np.float64)
    return scale["min"] + q / 65535.0 * (scale["max"] - scale["min"])


def write_results(results: list[AnomalyResult], out_dir, category: str = "") -> Path:
    out_dir = Path(out_dir)
    maps = out_dir / "maps"
    maps.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: r.sample_id)
    lines = [json.dumps({"format": RESULTS_FORMAT, "category": category, "n": len(results)},
                        sort_keys=True)]
    for r in results:
        rec = {"sample_id": r.sample_id, "label": r.label,
               "image_score_fused": r.image_score_fused, "image_score_rgb": r.image_score_rgb,
               "image_score_pt": r.image_score_pt}
        for name, arr in (("fused", r.pixel_map_fused), ("rgb", r.pixel_map_rgb),
                          ("pt", r.pixel_map_pt)):
            rel = f"maps/{r.sample_id}_{name}.png"
            save_map(arr, out_dir / rel)
            rec["map" if name == "fused" else f"map_{name}"] = rel
        lines.append(json.dumps(rec, sort_keys=True))
    path = out_dir / "results.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def score_dataset(test: list[SampleFeatures], adaptors, banks, smoothing_sigma=None,
                  labels: dict | None = None, out_dir=None, category: str = "",
                  image_size=None) -> list[AnomalyResult]:
    labels = labels or {}
    results = [score_sample(sf, adaptors, banks, smoothing_sigma, image_size,
                            labels.get(sf.sample_id))
               for sf in sorted(test, key=lambda s: s.sample_id)]
    if out_dir is not None:
        write_results(results, out_dir, category)
    return results
