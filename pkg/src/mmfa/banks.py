"""Memory banks: FIFO training banks with exact nearest-neighbour search, and
greedy k-center coresets for inference.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, EmptyBankError, FormatError


def nearest_rows(items: np.ndarray, queries: np.ndarray, exclude_owner=None, owners=None):
    """Exact L2 nearest item for each query; ties go to the lowest item index.

    Candidates are screened with the fast ``|a|^2 + |b|^2 - 2ab`` expansion,
    then every candidate within a rounding margin of the best is re-measured
    directly, so the answer agrees with a brute-force scan.
    """
    items = np.asarray(items, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    d2 = (queries**2).sum(1)[:, None] + (items**2).sum(1)[None, :] - 2.0 * queries @ items.T
    if exclude_owner is not None:
        blocked = owners[None, :] == np.asarray(exclude_owner)[:, None]
        d2 = np.where(blocked, np.inf, d2)
    best = d2.min(axis=1)
    if not np.isfinite(best).all():
        raise EmptyBankError("no admissible bank item for some query")
    scale = (queries**2).sum(1) + (items**2).sum(1).max()
    margin = 1e-9 * scale + 1e-12
    cand_mask = d2 <= (best + margin)[:, None]
    idx = np.argmin(d2, axis=1)
    dist = np.sqrt(((items[idx] - queries) ** 2).sum(axis=1))
    for i in np.nonzero(cand_mask.sum(axis=1) > 1)[0]:
        cand = np.nonzero(d2[i] <= best[i] + margin[i])[0]
        exact = np.sqrt(((items[cand] - queries[i]) ** 2).sum(axis=1))
        j = int(np.argmin(exact))
        idx[i] = cand[j]
        dist[i] = exact[j]
    return idx, dist


class MemoryBank:
    """Bounded FIFO store of D-dim vectors (oldest evicted first).

    Logical index 0 is the oldest stored item. Each item may carry an integer
    ``owner`` tag so queries can skip entries from their own sample.
    """

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 1:
            raise ConfigurationError("bank capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = dim
        self._data = None
        self._owner = None
        self._start = 0
        self._size = 0
        self.n_inserted = 0

    def __len__(self):
        return self._size

    def _grow(self, needed):
        cap = self._data.shape[0] if self._data is not None else 0
        if needed <= cap:
            return
        new_cap = min(self.capacity, max(needed, 2 * cap, 64))
        data = np.empty((new_cap, self.dim))
        owner = np.empty(new_cap, dtype=np.int64)
        if self._size:
            data[: self._size] = self.items()
            owner[: self._size] = self.owners()
        self._data, self._owner, self._start = data, owner, 0

    def enqueue(self, vectors, owners=None):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.size == 0:
            return
        if self.dim is None:
            self.dim = vectors.shape[1]
        if vectors.shape[1] != self.dim:
            raise ContractError(f"bank dim is {self.dim}, got vectors of dim {vectors.shape[1]}")
        own = np.full(len(vectors), -1, dtype=np.int64) if owners is None else \
            np.broadcast_to(np.asarray(owners, dtype=np.int64), (len(vectors),))
        self.n_inserted += len(vectors)
        if len(vectors) >= self.capacity:
            vectors, own = vectors[-self.capacity:], own[-self.capacity:]
            self._data = None
            self._size = 0
            self._grow(self.capacity)
            self._data[:] = vectors
            self._owner[:] = own
            self._size = self.capacity
            return
        self._grow(min(self.capacity, self._size + len(vectors)))
        cap = self._data.shape[0]
        pos = (self._start + self._size + np.arange(len(vectors))) % cap
        self._data[pos] = vectors
        self._owner[pos] = own
        total = self._size + len(vectors)
        if total > cap:
            self._start = (self._start + total - cap) % cap
            self._size = cap
        else:
            self._size = total

    def _order(self):
        cap = self._data.shape[0]
        return (self._start + np.arange(self._size)) % cap

    def items(self) -> np.ndarray:
        if self._size == 0:
            return np.empty((0, self.dim or 0))
        return self._data[self._order()]

    def owners(self) -> np.ndarray:
        if self._size == 0:
            return np.empty(0, dtype=np.int64)
        return self._owner[self._order()]

    def nearest(self, queries, exclude_owner=None):
        """``(indices, distances)`` of the nearest stored item per query row."""
        if self._size == 0:
            raise EmptyBankError("memory bank is empty")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.dim:
            raise ContractError(f"bank dim is {self.dim}, query dim {queries.shape[1]}")
        if exclude_owner is not None:
            exclude_owner = np.broadcast_to(np.asarray(exclude_owner), (len(queries),))
        return nearest_rows(self.items(), queries, exclude_owner, self.owners())


def bank_new(capacity: int, dim: int | None = None) -> MemoryBank:
    return MemoryBank(capacity, dim)


def bank_enqueue(bank: MemoryBank, vectors, owners=None):
    bank.enqueue(vectors, owners)


def bank_nearest(bank: MemoryBank, query):
    """Single-query form: ``(index, distance)``."""
    idx, dist = bank.nearest(np.asarray(query, dtype=np.float64).reshape(1, -1))
    return int(idx[0]), float(dist[0])


# ---------------------------------------------------------------------------
# coreset


@dataclass(frozen=True)
class CoresetBank:
    vectors: np.ndarray
    indices: np.ndarray
    source_size: int

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.indices)

    def distances(self, queries) -> np.ndarray:
        """L2 distance of each query row to its nearest coreset vector."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.dim:
            raise ContractError(f"coreset dim is {self.dim}, query dim {queries.shape[1]}")
        return nearest_rows(self.vectors, queries)[1]


def greedy_k_center(vectors: np.ndarray, m: int) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    min_d = np.sqrt(((vectors - vectors[0]) ** 2).sum(axis=1))
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        min_d = np.minimum(min_d, np.sqrt(((vectors - vectors[nxt]) ** 2).sum(axis=1)))
    return chosen


def coverage_radius(vectors, selected) -> float:
    vectors = np.asarray(vectors, dtype=np.float64)
    return float(nearest_rows(vectors[np.asarray(selected)], vectors)[1].max())


def coreset_select(vectors, m: int) -> CoresetBank:
    """Farthest-first greedy k-center subset of size ``m``, starting at row 0."""
    vectors = np.asarray(vectors)
    n = len(vectors)
    if not 1 <= m <= n:
        raise ConfigurationError(f"coreset size {m} outside [1, {n}]")
    idx = greedy_k_center(vectors, m)
    return CoresetBank(vectors=vectors[idx].copy(), indices=idx, source_size=n)


# ---------------------------------------------------------------------------
# inference bank file
#
#   b"MMCB" u16 version=1 u16 reserved u32 D u32 m u32 source_size
#   float32[m*D] vectors, int64[m] selection indices   (little-endian)

_CB_HEADER = struct.Struct("<4sHHIII")


def save_coreset(bank: CoresetBank, path):
    m, d = bank.vectors.shape
    Path(path).write_bytes(
        _CB_HEADER.pack(b"MMCB", 1, 0, d, m, bank.source_size)
        + np.ascontiguousarray(bank.vectors, dtype="<f4").tobytes()
        + np.ascontiguousarray(bank.indices, dtype="<i8").tobytes())


def load_coreset(path) -> CoresetBank:
    raw = Path(path).read_bytes()
    try:
        magic, version, _, d, m, src = _CB_HEADER.unpack_from(raw)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated bank header") from exc
    if magic != b"MMCB" or version != 1:
        raise FormatError(f"{path}: not an inference bank file")
    if len(raw) != _CB_HEADER.size + 4 * m * d + 8 * m:
        raise FormatError(f"{path}: size mismatch")
    off = _CB_HEADER.size
    vec = np.frombuffer(raw, dtype="<f4", count=m * d, offset=off).reshape(m, d)
    idx = np.frombuffer(raw, dtype="<i8", count=m, offset=off + 4 * m * d)
    return CoresetBank(vec.astype(np.float64), idx.astype(np.int64), src)
