"""Patch-aligned feature containers passed between pipeline stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODALITIES = ("rgb", "point")


@dataclass
class FeatureGrid:
    """``N_m = g_h * g_w`` feature rows for one modality of one sample.

    ``mask`` marks the patches that take part in banks and losses; rows
    outside it are carried along but ignored downstream.
    """

    modality: str
    grid_shape: tuple[int, int]
    features: np.ndarray
    mask: np.ndarray | None = None
    patch_size: int | None = None
    sample_id: str = ""

    def __post_init__(self):
        self.grid_shape = (int(self.grid_shape[0]), int(self.grid_shape[1]))
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or self.features.shape[0] != self.n_patches:
            raise ValueError(
                f"features shape {self.features.shape} does not match grid {self.grid_shape}"
            )
        if self.mask is None:
            self.mask = np.ones(self.n_patches, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)

    @property
    def n_patches(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def patch_rect(self, index: int) -> tuple[int, int, int, int]:
        """Pixel rectangle ``(row0, col0, row1, col1)`` covered by patch ``index``."""
        if self.patch_size is None:
            raise ValueError("grid has no pixel footprint (imported features)")
        r, c = divmod(index, self.grid_shape[1])
        p = self.patch_size
        return r * p, c * p, (r + 1) * p, (c + 1) * p

    def participating(self) -> np.ndarray:
        return self.features[self.mask]


@dataclass
class ProjectedPointGrid(FeatureGrid):
    """Point features averaged per image patch after pinhole projection."""

    occupancy: np.ndarray = field(default=None)
    point_count: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        if self.occupancy is None:
            self.occupancy = self.mask.copy()
        self.occupancy = np.asarray(self.occupancy, dtype=bool).reshape(-1)
        if self.point_count is None:
            self.point_count = self.occupancy.astype(np.int64)
