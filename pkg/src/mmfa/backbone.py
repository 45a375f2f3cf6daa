"""Frozen feature extraction upstream of the adaptors.

The toy backbones are fixed seeded random projections followed by ``tanh``;
they never train. Real-backbone features can bypass this module entirely via
:func:`mmfa.dataio.import_precomputed_features`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .dataio import MultimodalSample, write_feature_archive
from .errors import ConfigurationError, ContractError, DegenerateInputError
from .grids import FeatureGrid

RANSAC_THRESHOLD = 0.05


@dataclass(frozen=True)
class RGBBackboneSpec:
    patch_size: int = 8
    feature_dim: int = 64
    gain: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ConfigurationError("feature_dim must be >= 8")
        if self.patch_size < 1:
            raise ConfigurationError("patch_size must be >= 1")

    def weights(self):
        rng = np.random.default_rng([self.seed, 0x5247])
        fan_in = 3 * self.patch_size**2
        W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, self.feature_dim))
        b = rng.normal(0.0, 0.1, size=self.feature_dim)
        return W, b


@dataclass(frozen=True)
class PointBackboneSpec:
    n_groups: int = 128
    group_size: int = 16
    feature_dim: int = 64
    coord_scale: float = 40.0
    gain: float = 1.0
    seed: int = 0
    pooling: str = "flatten"  # flatten | mean

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ConfigurationError("feature_dim must be >= 8")
        if self.group_size < 1 or self.n_groups < 1:
            raise ConfigurationError("n_groups and group_size must be >= 1")
        if self.pooling not in ("flatten", "mean"):
            raise ConfigurationError("pooling must be 'flatten' or 'mean'")

    def weights(self):
        rng = np.random.default_rng([self.seed, 0x5054])
        fan_in = 3 * self.group_size if self.pooling == "flatten" else 3
        W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, self.feature_dim))
        b = rng.normal(0.0, 0.1, size=self.feature_dim)
        return W, b


@dataclass
class PointGroups:
    centers: np.ndarray          # N_d x 3
    center_indices: np.ndarray   # N_d, indices into the input points
    member_indices: np.ndarray   # N_d x k, nearest first
    features: np.ndarray | None = None  # N_d x D

    def __len__(self):
        return len(self.centers)


# ---------------------------------------------------------------------------
# background removal


def _orient(normal, offset):
    # normal faces the camera at the origin (offset > 0); planes through the
    # origin fall back to a non-negative z component
    if offset < 0 or (offset == 0 and normal[2] < 0):
        return -normal, -offset
    return normal, offset


def ransac_plane_fit(points, threshold: float = RANSAC_THRESHOLD, n_iters: int = 200,
                     seed: int = 0, valid=None):
    """Fit ``n . x + d = 0`` to the dominant plane of ``points``.

    Returns ``(plane, inlier_mask)`` with ``plane = (nx, ny, nz, d)``,
    ``|n| = 1`` and ``inlier_mask`` of the same leading shape as ``points``
    marking valid points within ``threshold`` orthogonal distance.
    """
    if not threshold > 0:
        raise ConfigurationError("threshold must be positive")
    points = np.asarray(points, dtype=np.float64)
    lead_shape = points.shape[:-1]
    flat = points.reshape(-1, 3)
    ok = np.ones(len(flat), bool) if valid is None else np.asarray(valid, bool).reshape(-1)
    ok &= np.isfinite(flat).all(axis=1)
    P = flat[ok]
    if len(P) < 3:
        raise DegenerateInputError(f"need >= 3 valid points, got {len(P)}")
    spread = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1.0):
        raise DegenerateInputError("points are collinear; plane is undetermined")

    rng = np.random.default_rng(seed)
    best_count, best = -1, None
    for _ in range(n_iters):
        a, b, c = P[rng.choice(len(P), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-15:
            continue
        n = n / norm
        d = -n @ a
        count = int(np.count_nonzero(np.abs(P @ n + d) <= threshold))
        if count > best_count:
            best_count, best = count, (n, d)
    if best is None:
        raise DegenerateInputError("no non-degenerate point triple found")

    # least-squares refinement on the consensus set, kept only if it does not lose support
    n, d = best
    inl = np.abs(P @ n + d) <= threshold
    centroid = P[inl].mean(axis=0)
    _, _, vt = np.linalg.svd(P[inl] - centroid)
    n2 = vt[-1]
    d2 = -n2 @ centroid
    if np.count_nonzero(np.abs(P @ n2 + d2) <= threshold) >= best_count:
        n, d = n2, d2

    n, d = _orient(n, d)
    mask = np.zeros(len(flat), dtype=bool)
    mask[ok] = np.abs(P @ n + d) <= threshold
    return np.append(n, d), mask.reshape(lead_shape)


def foreground_mask(sample: MultimodalSample, threshold: float = RANSAC_THRESHOLD,
                    n_iters: int = 200, seed: int = 0) -> np.ndarray:
    """Valid points that are not on the background plane."""
    _, inliers = ransac_plane_fit(sample.points, threshold, n_iters, seed, valid=sample.valid)
    return sample.valid & ~inliers


# ---------------------------------------------------------------------------
# RGB


def extract_rgb_features(sample: MultimodalSample, spec: RGBBackboneSpec,
                         fg_mask=None) -> FeatureGrid:
    """Patchify, apply the fixed random map, ``tanh``.

    Patches with zero foreground coverage are left out of ``mask``.
    ``fg_mask`` defaults to the sample's stored foreground.
    """
    h, w = sample.image_size
    p = spec.patch_size
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {p}")
    g_h, g_w = h // p, w // p
    patches = (np.asarray(sample.rgb, dtype=np.float64) - 0.5).reshape(g_h, p, g_w, p, 3)
    patches = patches.transpose(0, 2, 1, 3, 4).reshape(g_h * g_w, -1)
    W, b = spec.weights()
    feats = np.tanh(spec.gain * (patches @ W) + b)

    fg = sample.fg_mask if fg_mask is None else fg_mask
    coverage = np.asarray(fg, bool).reshape(g_h, p, g_w, p).any(axis=(1, 3)).reshape(-1)
    return FeatureGrid("rgb", (g_h, g_w), feats.astype(np.float32), mask=coverage,
                       patch_size=p, sample_id=sample.sample_id)


# ---------------------------------------------------------------------------
# point groups


def farthest_point_sampling(points: np.ndarray, n: int) -> np.ndarray:
    """Indices of ``n`` centres, greedy farthest-first from index 0 (ties: lower index)."""
    points = np.asarray(points, dtype=np.float64)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0
    min_d = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        min_d = np.minimum(min_d, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def group_points(points, n_groups: int, group_size: int) -> PointGroups:
    """FPS centres plus the ``group_size`` nearest points of each (ties: lower index)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n_groups < 1 or group_size < 1:
        raise ConfigurationError("n_groups and group_size must be >= 1")
    if n < n_groups or n < group_size:
        raise DegenerateInputError(
            f"{n} points cannot form {n_groups} groups of {group_size}")
    idx = farthest_point_sampling(points, n_groups)
    centers = points[idx]
    dist = cdist(centers, points)
    members = np.argsort(dist, axis=1, kind="stable")[:, :group_size]
    return PointGroups(centers=centers, center_indices=idx, member_indices=members)


def extract_point_features(groups: PointGroups, points, spec: PointBackboneSpec) -> PointGroups:
    """``A_i = tanh(gain * W^T vec(members - c_i) + b)`` -- translation invariant."""
    points = np.asarray(points, dtype=np.float64)
    if len(groups) == 0 or groups.member_indices.shape[1] == 0:
        raise DegenerateInputError("empty point group")
    if groups.member_indices.shape[1] != spec.group_size:
        raise ContractError("group size differs from backbone spec")
    local = points[groups.member_indices] - groups.centers[:, None, :]
    W, b = spec.weights()
    if spec.pooling == "flatten":
        x = spec.coord_scale * local.reshape(len(groups), -1)
        feats = np.tanh(spec.gain * (x @ W) + b)
    else:
        # per-member map, then an order-free mean over the group
        feats = np.tanh(spec.gain * (spec.coord_scale * local @ W) + b).mean(axis=1)
    return PointGroups(groups.centers, groups.center_indices, groups.member_indices,
                       feats.astype(np.float32))


# ---------------------------------------------------------------------------
# export


def export_features(grids, path):
    """Write ``{sample_id: {modality: grid}}`` (or ``(id, grid)`` pairs) as a feature archive."""
    if isinstance(grids, dict):
        records = [(sid, g) for sid, pair in grids.items() for g in pair.values()]
    else:
        records = list(grids)
    dims = {}
    for sid, g in records:
        if dims.setdefault(g.modality, g.dim) != g.dim:
            raise ContractError(
                f"{g.modality} features of {sid!r} have D={g.dim}, expected {dims[g.modality]}")
    write_feature_archive(records, path)
