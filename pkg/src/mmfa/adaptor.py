"""Trainable adaptor (one pre-norm transformer encoder layer), projection head,
and k-means pooling of patch features into one instance-level vector.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ContractError, DegenerateInputError, FormatError, \
    NumericalDegeneracyError

PROJECTION_DIM = 512
STRUCTURES = ("encoder",)


class Adaptor(nn.Module):
    """Pre-norm residual encoder layer plus a linear projection head.

    The attention output projection, the last feed-forward layer and the
    positional embeddings start at zero, so a fresh adaptor is the identity.
    """

    def __init__(self, dim: int, grid_shape, n_heads: int = 4, ff_mult: int = 2,
                 proj_dim: int = PROJECTION_DIM, modality: str = "rgb", seed: int = 0,
                 structure: str = "encoder"):
        super().__init__()
        if structure not in STRUCTURES:
            raise ConfigurationError(
                f"adaptor structure {structure!r} not available (only {STRUCTURES})")
        if n_heads < 1 or dim % n_heads:
            raise ConfigurationError(f"D={dim} not divisible by n_heads={n_heads}")
        self.dim = dim
        self.grid_shape = (int(grid_shape[0]), int(grid_shape[1]))
        self.n_heads = n_heads
        self.ff_mult = ff_mult
        self.proj_dim = proj_dim
        self.modality = modality
        self.seed = seed
        self.structure = structure
        n_m = self.grid_shape[0] * self.grid_shape[1]

        gen = torch.Generator().manual_seed(int(seed))
        self.pos_embed = nn.Parameter(torch.zeros(n_m, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_mult * dim)
        self.ff2 = nn.Linear(ff_mult * dim, dim)
        self.head = nn.Linear(dim, proj_dim)

        with torch.no_grad():
            for lin in (self.qkv, self.ff1, self.head):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.copy_(torch.empty_like(lin.weight).uniform_(-bound, bound, generator=gen))
                lin.bias.zero_()
            for lin in (self.attn_out, self.ff2):
                lin.weight.zero_()
                lin.bias.zero_()

    def config(self) -> dict:
        return {"dim": self.dim, "grid_shape": list(self.grid_shape), "n_heads": self.n_heads,
                "ff_mult": self.ff_mult, "proj_dim": self.proj_dim, "modality": self.modality,
                "seed": self.seed, "structure": self.structure}

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: (B, N_m, D) or (N_m, D); ``mask``: matching boolean participation."""
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        b, n, d = x.shape
        if n != self.pos_embed.shape[0] or d != self.dim:
            raise ContractError(f"adaptor expects (*, {self.pos_embed.shape[0]}, {self.dim}), got {tuple(x.shape)}")
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool)

        hd = d // self.n_heads
        h = self.norm1(x) + self.pos_embed
        q, k, v = self.qkv(h).split(d, dim=-1)
        q = q.view(b, n, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, n, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, n, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        # fully masked query rows would give NaN; they are restored below anyway
        scores = scores.masked_fill(~mask[:, None, :, None], 0.0)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        y = x + self.attn_out(ctx)
        y = y + self.ff2(torch.nn.functional.gelu(self.ff1(self.norm2(y))))
        out = torch.where(mask[..., None], y, x)
        return out[0] if single else out

    def project(self, features: torch.Tensor, normalize: bool = True,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """Affine map to ``proj_dim`` followed by row-wise L2 normalisation.

        Only rows inside ``mask`` must be non-zero; masked-out rows are
        normalised with a clamped norm and should not be used.
        """
        if features.shape[-1] != self.dim:
            raise ContractError(f"head expects D={self.dim}, got {features.shape[-1]}")
        z = self.head(features)
        if not normalize:
            return z
        norms = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
        live = norms[..., 0] < 1e-12
        if mask is not None:
            live = live & torch.as_tensor(np.asarray(mask, dtype=bool))
        if bool(live.any()):
            raise NumericalDegeneracyError("projection head produced a zero row; cannot normalise")
        return z / norms.clamp(min=1e-12)

    def decay_groups(self, weight_decay: float):
        """Optimizer parameter groups: decay on linear weights only."""
        decay, no_decay = [], []
        for name, p in self.named_parameters():
            (decay if name.endswith("weight") and "norm" not in name else no_decay).append(p)
        return [{"params": decay, "weight_decay": weight_decay},
                {"params": no_decay, "weight_decay": 0.0}]


def init_adaptor(dim: int, grid_shape, n_heads: int = 4, seed: int = 0, modality: str = "rgb",
                 **kwargs) -> Adaptor:
    return Adaptor(dim, grid_shape, n_heads=n_heads, seed=seed, modality=modality, **kwargs).double()


def adapt(features, state: Adaptor, mask=None) -> torch.Tensor:
    """Run the adaptor on one grid (``FeatureGrid`` or array) in the adaptor's dtype."""
    if hasattr(features, "features"):
        mask = features.mask if mask is None else mask
        features = features.features
    dtype = next(state.parameters()).dtype
    x = torch.as_tensor(np.asarray(features), dtype=dtype) if not torch.is_tensor(features) \
        else features.to(dtype)
    m = None if mask is None else torch.as_tensor(np.asarray(mask, dtype=bool))
    return state(x, m)


def project_head(features: torch.Tensor, state: Adaptor, normalize: bool = True) -> torch.Tensor:
    return state.project(features, normalize=normalize)


# ---------------------------------------------------------------------------
# k-means pooling


def lloyd_assign(rows: np.ndarray, k: int, seed: int = 0, max_iters: int = 50) -> np.ndarray:
    """Cluster labels from seeded k-means++ + Lloyd iterations.

    Rows are put in lexicographic order first, which makes the result
    independent of the input row order. Never opens more clusters than there
    are distinct rows; argmin ties go to the lower cluster index.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = len(rows)
    order = np.lexsort(rows.T[::-1])
    x = rows[order]
    rng = np.random.default_rng(seed)

    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break
        probs = d2 / total
        nxt = x[min(int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right")), n - 1)]
        if ((nxt - np.asarray(centers)) ** 2).sum(axis=1).min() == 0:
            continue
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - nxt) ** 2).sum(axis=1))
    c = np.asarray(centers)

    labels = None
    for _ in range(max_iters):
        dist = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(c)):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean(axis=0)
    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return out


def kmeans_global(features: torch.Tensor, mask=None, k: int = 3, seed: int = 0,
                  max_iters: int = 50) -> torch.Tensor:
    """Unweighted mean of k-means centroids over the participating rows.

    Assignments are computed without gradient; centroids are means of their
    assigned rows, so the result is differentiable w.r.t. ``features``.
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    rows = features if mask is None else features[torch.as_tensor(np.asarray(mask, dtype=bool))]
    if rows.shape[0] == 0:
        raise DegenerateInputError("no participating patch to pool")
    labels = lloyd_assign(rows.detach().cpu().numpy(), k, seed, max_iters)
    used = np.unique(labels)
    onehot = torch.zeros(len(used), rows.shape[0], dtype=rows.dtype)
    onehot[np.searchsorted(used, labels), np.arange(rows.shape[0])] = 1.0
    centroids = (onehot @ rows) / onehot.sum(dim=1, keepdim=True)
    return centroids.mean(dim=0)


# ---------------------------------------------------------------------------
# checkpoints
#
#   b"MMCK" u16 version=1 u16 reserved u32 header_len
#   header: utf-8 JSON {"config": {...}, "tensors": [{"name", "shape", "dtype"}]}
#   payloads: each tensor's little-endian bytes, in header order
#
# A checkpoint may hold several modules; tensor names are "<module>/<param>".

_CK_MAGIC = b"MMCK"
_CK_HEADER = struct.Struct("<4sHHI")


def save_checkpoint(path, modules: dict[str, Adaptor], extra: dict | None = None):
    tensors, payload = [], []
    for key in sorted(modules):
        for name, t in sorted(modules[key].state_dict().items()):
            arr = t.detach().cpu().numpy()
            dt = arr.dtype.newbyteorder("<")
            tensors.append({"name": f"{key}/{name}", "shape": list(arr.shape), "dtype": dt.str})
            payload.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = json.dumps({"config": {k: m.config() for k, m in sorted(modules.items())},
                         "extra": extra or {}, "tensors": tensors}, sort_keys=True).encode()
    Path(path).write_bytes(_CK_HEADER.pack(_CK_MAGIC, 1, 0, len(header)) + header + b"".join(payload))


def load_checkpoint(path) -> tuple[dict[str, Adaptor], dict]:
    raw = Path(path).read_bytes()
    try:
        magic, version, _, hlen = _CK_HEADER.unpack_from(raw)
        header = json.loads(raw[_CK_HEADER.size:_CK_HEADER.size + hlen])
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header") from exc
    if magic != _CK_MAGIC or version != 1:
        raise FormatError(f"{path}: not a checkpoint")
    modules = {}
    for key, cfg in header["config"].items():
        m = Adaptor(cfg["dim"], cfg["grid_shape"], n_heads=cfg["n_heads"], ff_mult=cfg["ff_mult"],
                    proj_dim=cfg["proj_dim"], modality=cfg["modality"], seed=cfg["seed"],
                    structure=cfg["structure"])
        modules[key] = m
    off = _CK_HEADER.size + hlen
    states: dict[str, dict] = {k: {} for k in modules}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        if off + count * dt.itemsize > len(raw):
            raise FormatError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(t["shape"])
        off += count * dt.itemsize
        key, name = t["name"].split("/", 1)
        states[key][name] = torch.from_numpy(arr.astype(dt.newbyteorder("=")))
    if off != len(raw):
        raise FormatError(f"{path}: size mismatch")
    for key, m in modules.items():
        dtype = next(iter(states[key].values())).dtype
        m.to(dtype)
        m.load_state_dict(states[key])
    return modules, header.get("extra", {})


@dataclass
class AdaptorPair:
    rgb: Adaptor
    point: Adaptor

    def __getitem__(self, modality: str) -> Adaptor:
        return getattr(self, modality)

    def modules(self) -> dict[str, Adaptor]:
        return {"rgb": self.rgb, "point": self.point}
