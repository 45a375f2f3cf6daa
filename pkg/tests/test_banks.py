import collections
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfa.banks import (CoresetBank, MemoryBank, bank_enqueue, bank_nearest, bank_new,
                        coreset_select, coverage_radius, greedy_k_center, load_coreset,
                        nearest_rows, save_coreset)
from mmfa.errors import ConfigurationError, ContractError, EmptyBankError, FormatError


def brute_nearest(items, q):
    d = [float(np.sqrt(((np.asarray(it) - q) ** 2).sum())) for it in items]
    best = min(d)
    return d.index(best), best


def brute_radius_opt(x, m):
    best = np.inf
    for sub in itertools.combinations(range(len(x)), m):
        r = max(min(np.linalg.norm(x[i] - x[j]) for j in sub) for i in range(len(x)))
        best = min(best, r)
    return best


def test_new_bank_and_capacity_guard():
    b = bank_new(5)
    assert len(b) == 0
    with pytest.raises(ConfigurationError):
        bank_new(0)


def test_dim_enforced_after_first_enqueue():
    b = bank_new(4)
    bank_enqueue(b, np.zeros((2, 3)))
    assert b.dim == 3
    with pytest.raises(ContractError):
        bank_enqueue(b, np.zeros((1, 4)))


def test_fifo_examples():
    b = bank_new(3, 1)
    for v in "abcd":
        bank_enqueue(b, [[ord(v)]])
    assert b.items()[:, 0].tolist() == [ord("b"), ord("c"), ord("d")]
    b = bank_new(3, 1)
    bank_enqueue(b, np.arange(10.0)[:, None])
    assert b.items()[:, 0].tolist() == [7.0, 8.0, 9.0]


def test_fifo_matches_deque_over_many_operations():
    rng = np.random.default_rng(0)
    for capacity in (1, 3, 17, 64):
        bank, ref = MemoryBank(capacity, 2), collections.deque(maxlen=capacity)
        for step in range(2500):
            k = int(rng.integers(0, 2 * capacity + 3))
            vecs = rng.normal(size=(k, 2))
            bank.enqueue(vecs, np.full(k, step))
            ref.extend(map(tuple, vecs))
            assert len(bank) == len(ref) <= capacity
        np.testing.assert_array_equal(bank.items(), np.array(ref).reshape(-1, 2))


def test_nearest_examples():
    b = bank_new(4)
    bank_enqueue(b, [[0.0, 0.0], [3.0, 4.0]])
    idx, d = bank_nearest(b, [1.0, 1.0])
    assert idx == 0 and d == pytest.approx(np.sqrt(2), abs=1e-15)
    assert bank_nearest(b, [3.0, 4.0]) == (1, 0.0)
    b = bank_new(4)
    bank_enqueue(b, [[1.0, 0.0], [-1.0, 0.0]])
    assert bank_nearest(b, [0.0, 0.0])[0] == 0
    with pytest.raises(EmptyBankError):
        bank_nearest(bank_new(2, 2), [0.0, 0.0])


@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 6))
@settings(max_examples=120, deadline=None)
def test_nearest_equals_brute_force(seed, n, d):
    rng = np.random.default_rng(seed)
    # a coarse lattice makes exact ties and duplicates common
    items = rng.integers(-3, 4, size=(n, d)).astype(float)
    queries = rng.integers(-3, 4, size=(5, d)).astype(float)
    idx, dist = nearest_rows(items, queries)
    for q, i, di in zip(queries, idx, dist):
        bi, bd = brute_nearest(items, q)
        assert (i, di) == (bi, bd)


def test_exclude_owner_skips_own_entries():
    b = bank_new(10)
    b.enqueue([[0.0], [5.0], [1.0]], owners=[7, 8, 9])
    idx, dist = b.nearest([[0.0]], exclude_owner=7)
    assert idx[0] == 2 and dist[0] == 1.0


def test_coreset_examples():
    x = np.random.default_rng(1).normal(size=(12, 3))
    assert sorted(coreset_select(x, 12).indices.tolist()) == list(range(12))
    assert coreset_select(x, 1).indices.tolist() == [0]
    with pytest.raises(ConfigurationError):
        coreset_select(x, 0)
    with pytest.raises(ConfigurationError):
        coreset_select(x, 13)


def test_coreset_two_approximation_plane_fixture():
    x = np.random.default_rng(5).random((8, 2))
    sel = greedy_k_center(x, 3)
    assert coverage_radius(x, sel) <= 2 * brute_radius_opt(x, 3) + 1e-12


def test_coverage_radius_non_increasing_in_m():
    x = np.random.default_rng(2).normal(size=(40, 4))
    radii = [coverage_radius(x, greedy_k_center(x, m)) for m in range(1, 41)]
    assert all(a >= b for a, b in zip(radii, radii[1:]))
    assert radii[-1] == 0.0


def test_coreset_roundtrip(tmp_path):
    x = np.random.default_rng(3).normal(size=(30, 5)).astype(np.float32).astype(np.float64)
    bank = coreset_select(x, 7)
    save_coreset(bank, tmp_path / "b.bin")
    back = load_coreset(tmp_path / "b.bin")
    assert isinstance(back, CoresetBank)
    np.testing.assert_array_equal(back.vectors, bank.vectors)
    np.testing.assert_array_equal(back.indices, bank.indices)
    assert back.source_size == 30
    (tmp_path / "bad.bin").write_bytes(b"MMCB")
    with pytest.raises(FormatError):
        load_coreset(tmp_path / "bad.bin")
