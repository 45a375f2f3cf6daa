"""Training objectives: cross-modal contrastive alignment (local and global),
intra-modal compactness against memory banks, and their weighted total.

Contrastive inputs are expected to be L2-normalised projections; logits are
inner products divided by ``temperature``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .banks import MemoryBank, nearest_rows
from .errors import ContractError, DegenerateInputError, EmptyBankError


def _pair_contrast(a: torch.Tensor, b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Per-row ``-log(exp<a_j,b_j> / sum_{t,k} exp<a_t,b_k>)``."""
    logits = a @ b.T / temperature
    return torch.logsumexp(logits.reshape(-1), dim=0) - torch.diagonal(logits)


def local_alignment_terms(f_rgb: torch.Tensor, f_pt: torch.Tensor, mask=None,
                          temperature: float = 1.0) -> torch.Tensor:
    if f_rgb.shape != f_pt.shape:
        raise ContractError(f"shape mismatch {tuple(f_rgb.shape)} vs {tuple(f_pt.shape)}")
    if mask is not None:
        m = torch.as_tensor(np.asarray(mask, dtype=bool))
        f_rgb, f_pt = f_rgb[m], f_pt[m]
    if f_rgb.shape[0] == 0:
        raise DegenerateInputError("no participating patch for local alignment")
    return _pair_contrast(f_rgb, f_pt, temperature)


def local_alignment_loss(f_rgb, f_pt, mask=None, temperature: float = 1.0) -> torch.Tensor:
    """Patch-wise contrast between the two modalities of one sample (mean over patches)."""
    return local_alignment_terms(f_rgb, f_pt, mask, temperature).mean()


def global_alignment_loss(g_rgb: torch.Tensor, g_pt: torch.Tensor,
                          temperature: float = 1.0) -> torch.Tensor:
    """Instance-level contrast across a batch; a batch of one contributes 0."""
    if g_rgb.shape != g_pt.shape or g_rgb.dim() != 2:
        raise ContractError(f"shape mismatch {tuple(g_rgb.shape)} vs {tuple(g_pt.shape)}")
    if g_rgb.shape[0] < 2:
        return g_rgb.sum() * 0.0
    return _pair_contrast(g_rgb, g_pt, temperature).mean()


def compactness_distances(rows: torch.Tensor, bank, exclude_owner=None,
                          squared: bool = False) -> torch.Tensor:
    """Distance of every row to its nearest bank item; bank items are constants."""
    if isinstance(bank, MemoryBank):
        if len(bank) == 0:
            raise EmptyBankError("memory bank is empty")
        idx, _ = bank.nearest(rows.detach().cpu().numpy(), exclude_owner=exclude_owner)
        items = bank.items()
    else:
        items = np.atleast_2d(np.asarray(bank, dtype=np.float64))
        if len(items) == 0:
            raise EmptyBankError("memory bank is empty")
        idx, _ = nearest_rows(items, rows.detach().cpu().numpy())
    target = torch.as_tensor(items[idx], dtype=rows.dtype)
    diff = rows - target
    if squared:
        return (diff**2).sum(dim=-1)
    return torch.linalg.vector_norm(diff, dim=-1)


def local_compactness_loss(rows, bank, exclude_owner=None, squared: bool = False) -> torch.Tensor:
    """Mean distance of participating patch rows to their nearest local-bank item."""
    return compactness_distances(rows, bank, exclude_owner, squared).mean()


def global_compactness_loss(g, bank, exclude_owner=None, squared: bool = False) -> torch.Tensor:
    """Mean distance of instance vectors (one row per sample) to the global bank."""
    return compactness_distances(torch.atleast_2d(g), bank, exclude_owner, squared).mean()


@dataclass
class LossReport:
    l_la: float
    l_ga: float
    l_clc: float
    l_lc_rgb: float
    l_lc_pt: float
    l_gc_rgb: float
    l_gc_pt: float
    l_ifc: float
    l_lsfa: float
    lam: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossTerms:
    """Differentiable pieces of one evaluation; ``report()`` gives plain floats."""

    la: torch.Tensor
    ga: torch.Tensor
    lc_rgb: torch.Tensor
    lc_pt: torch.Tensor
    gc_rgb: torch.Tensor
    gc_pt: torch.Tensor
    lam: float

    @property
    def clc(self):
        return self.la + self.ga

    @property
    def ifc_rgb(self):
        return self.lc_rgb + self.gc_rgb

    @property
    def ifc_pt(self):
        return self.lc_pt + self.gc_pt

    @property
    def ifc(self):
        return self.ifc_rgb + self.ifc_pt

    @property
    def total(self):
        return self.ifc + self.lam * self.clc

    def report(self) -> LossReport:
        f = lambda t: float(t.detach())  # noqa: E731
        return LossReport(l_la=f(self.la), l_ga=f(self.ga), l_clc=f(self.clc),
                          l_lc_rgb=f(self.lc_rgb), l_lc_pt=f(self.lc_pt),
                          l_gc_rgb=f(self.gc_rgb), l_gc_pt=f(self.gc_pt),
                          l_ifc=f(self.ifc), l_lsfa=f(self.total), lam=self.lam)


def total_loss(proj_rgb, proj_pt, masks, gproj_rgb, gproj_pt,
               local_rgb, local_pt, global_rgb, global_pt, banks, lam: float = 0.6,
               owners=None, temperature: float = 1.0, squared: bool = False) -> LossTerms:
    """Assemble every term for one batch.

    ``proj_*``: (B, N_m, P) normalised patch projections; ``masks``: (B, N_m)
    participation; ``gproj_*``: (B, P) normalised global projections;
    ``local_*`` / ``global_*``: adapted features (B, N_m, D) / (B, D);
    ``banks``: mapping with keys ``rgb_local``, ``rgb_global``, ``point_local``,
    ``point_global``; ``owners``: optional per-sample tags excluded from
    their own nearest-neighbour search.
    """
    masks = torch.as_tensor(np.asarray(masks, dtype=bool))
    b = masks.shape[0]
    la = torch.stack([local_alignment_loss(proj_rgb[i], proj_pt[i], masks[i], temperature)
                      for i in range(b)]).mean()
    ga = global_alignment_loss(gproj_rgb, gproj_pt, temperature)

    patch_owner = None
    if owners is not None:
        owners = np.asarray(owners)
        patch_owner = np.repeat(owners, masks.sum(dim=1).numpy())
    lc_rgb = local_compactness_loss(local_rgb[masks], banks["rgb_local"], patch_owner, squared)
    lc_pt = local_compactness_loss(local_pt[masks], banks["point_local"], patch_owner, squared)
    gc_rgb = global_compactness_loss(global_rgb, banks["rgb_global"], owners, squared)
    gc_pt = global_compactness_loss(global_pt, banks["point_global"], owners, squared)
    return LossTerms(la, ga, lc_rgb, lc_pt, gc_rgb, gc_pt, float(lam))
