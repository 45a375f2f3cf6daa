"""Bring point-group features onto the RGB patch grid.

Each foreground point receives an inverse-distance blend of all group
features, is projected through the pinhole camera, and patch features are the
mean of the points landing in that patch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .backbone import (RANSAC_THRESHOLD, PointBackboneSpec, PointGroups, RGBBackboneSpec,
                       extract_point_features, extract_rgb_features, foreground_mask,
                       group_points)
from .dataio import MultimodalSample, load_sample
from .errors import DegenerateInputError
from .grids import FeatureGrid, ProjectedPointGrid

SNAP_DISTANCE = 1e-12


def interpolation_weights(p, centers) -> np.ndarray:
    """Normalised inverse-distance weights of ``p`` (or rows of ``p``) w.r.t. every centre.

    A point closer than ``SNAP_DISTANCE`` to a centre takes that centre's
    weight 1 (first such centre on ties).
    """
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) == 0:
        raise DegenerateInputError("no point groups to interpolate from")
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    dist = cdist(pts, centers)
    snapped = dist < SNAP_DISTANCE
    hit = snapped.any(axis=1)
    with np.errstate(divide="ignore"):
        inv = 1.0 / dist
    inv[hit] = 0.0
    weights = inv / inv.sum(axis=1, keepdims=True).clip(min=np.finfo(float).tiny)
    if hit.any():
        rows = np.nonzero(hit)[0]
        weights[rows] = 0.0
        weights[rows, np.argmax(snapped[rows], axis=1)] = 1.0
    return weights if np.ndim(p) > 1 else weights[0]


def interpolate_point_features(p, groups: PointGroups) -> np.ndarray:
    """``f_p = sum_i alpha_i A_i`` for one point or an (n, 3) array of points."""
    if len(groups) == 0 or groups.features is None:
        raise DegenerateInputError("groups carry no features")
    w = interpolation_weights(p, groups.centers)
    return w @ groups.features.astype(np.float64)


def pixel_of(points, intrinsics):
    """Pinhole projection to integer ``(row, col)``; non-positive depth gives -1."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    u = intrinsics[0, 0] * points[:, 0] / zs + intrinsics[0, 2]
    v = intrinsics[1, 1] * points[:, 1] / zs + intrinsics[1, 2]
    col = np.floor(u + 0.5).astype(np.int64)
    row = np.floor(v + 0.5).astype(np.int64)
    row[~ok] = -1
    col[~ok] = -1
    return row, col


def project_points_to_patches(points, point_features, intrinsics,
                              rgb_grid: FeatureGrid, image_size) -> ProjectedPointGrid:
    """Average per-point features into the RGB patch grid.

    Points behind the camera or projecting outside the image are dropped.
    """
    h, w = image_size
    p = rgb_grid.patch_size
    g_h, g_w = rgb_grid.grid_shape
    row, col = pixel_of(points, intrinsics)
    keep = (row >= 0) & (row < h) & (col >= 0) & (col < w)
    if not keep.any():
        raise DegenerateInputError("no point projects into the image; check calibration")
    patch = (row[keep] // p) * g_w + (col[keep] // p)
    feats = np.asarray(point_features, dtype=np.float64)[keep]
    n_m = g_h * g_w
    counts = np.bincount(patch, minlength=n_m)
    sums = np.zeros((n_m, feats.shape[1]))
    np.add.at(sums, patch, feats)
    occupied = counts > 0
    means = np.zeros_like(sums)
    means[occupied] = sums[occupied] / counts[occupied, None]
    return ProjectedPointGrid("point", (g_h, g_w), means.astype(np.float32), mask=occupied,
                              patch_size=p, sample_id=rgb_grid.sample_id,
                              occupancy=occupied, point_count=counts)


@dataclass(frozen=True)
class BackboneSpecs:
    rgb: RGBBackboneSpec = RGBBackboneSpec()
    point: PointBackboneSpec = PointBackboneSpec()
    ransac_threshold: float = RANSAC_THRESHOLD
    ransac_iters: int = 200
    ransac_seed: int = 0


def build_aligned_pair(sample: MultimodalSample, specs: BackboneSpecs = BackboneSpecs()):
    """Frozen RGB grid and projected point grid with a shared participation mask.

    Returns ``(rgb_grid, point_grid, fg)`` where ``fg`` is the RANSAC
    foreground used for both modalities.
    """
    fg = foreground_mask(sample, specs.ransac_threshold, specs.ransac_iters, specs.ransac_seed)
    if not fg.any():
        raise DegenerateInputError(f"sample {sample.sample_id!r}: empty foreground")
    rgb = extract_rgb_features(sample, specs.rgb, fg_mask=fg)
    pts = sample.points[fg]
    groups = group_points(pts, min(specs.point.n_groups, len(pts)), specs.point.group_size)
    groups = extract_point_features(groups, pts, specs.point)
    f_p = interpolate_point_features(pts, groups)
    proj = project_points_to_patches(pts, f_p, sample.intrinsics, rgb, sample.image_size)
    both = rgb.mask & proj.occupancy
    if not both.any():
        raise DegenerateInputError(f"sample {sample.sample_id!r}: no participating patch")
    rgb.mask = both.copy()
    proj.mask = both.copy()
    return rgb, proj, fg


@dataclass
class SampleFeatures:
    """Frozen, aligned features of one sample (``fg`` is None for imported grids)."""

    sample_id: str
    rgb: FeatureGrid
    point: FeatureGrid
    fg: np.ndarray | None = None


def extract_split(manifest, specs: BackboneSpecs = BackboneSpecs()) -> list[SampleFeatures]:
    out = []
    for sid in manifest.sample_ids:
        rgb, pts, fg = build_aligned_pair(load_sample(manifest, sid), specs)
        out.append(SampleFeatures(sid, rgb, pts, fg))
    return out


def features_from_import(grids: dict, sample_ids=None) -> list[SampleFeatures]:
    """Wrap ``import_precomputed_features`` output; participation = both masks."""
    ids = sorted(grids) if sample_ids is None else list(sample_ids)
    out = []
    for sid in ids:
        rgb, pts = grids[sid]["rgb"], grids[sid]["point"]
        both = rgb.mask & pts.mask
        rgb = FeatureGrid("rgb", rgb.grid_shape, rgb.features, both.copy(), rgb.patch_size, sid)
        pts = FeatureGrid("point", pts.grid_shape, pts.features, both.copy(), pts.patch_size, sid)
        out.append(SampleFeatures(sid, rgb, pts))
    return out
