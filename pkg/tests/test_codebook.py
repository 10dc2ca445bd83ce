import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abckit.codebook import (SourceCodebook, assign_codewords, bitstring, enumerate_constant_weight,
                             estimate_costs, members_for_source, min_ensemble_size, parse_bitstring,
                             splits_from_codebook, unrank_constant_weight, verify_theorem1)
from abckit.errors import CapacityExceeded, ConfigError, InvalidWeight, UnknownSource


def brute_words(n, w):
    # independent oracle: filter all 2^n integers by popcount, ascending
    return [tuple(int(b) for b in format(v, f"0{n}b")) for v in range(1 << n) if bin(v).count("1") == w]


@pytest.mark.parametrize("n,w", [(2, 1), (4, 2), (5, 2), (6, 3), (7, 1), (8, 4)])
def test_enumeration_matches_popcount_oracle(n, w):
    assert enumerate_constant_weight(n, w) == brute_words(n, w)


@given(st.integers(2, 12).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))))
@settings(max_examples=40, deadline=None)
def test_unrank_agrees_with_enumeration(nw):
    n, w = nw
    words = enumerate_constant_weight(n, w)
    assert len(words) == math.comb(n, w)
    for r in range(0, len(words), max(1, len(words) // 17)):
        assert unrank_constant_weight(n, w, r) == words[r]


def test_unrank_range():
    with pytest.raises(IndexError):
        unrank_constant_weight(4, 2, 6)


@pytest.mark.parametrize("n,w", [(4, 0), (4, 4), (1, 1), (65, 3)])
def test_bad_weights(n, w):
    with pytest.raises(InvalidWeight):
        enumerate_constant_weight(n, w)


@given(st.integers(2, 12), st.integers(0, 2**32), st.data())
@settings(max_examples=60, deadline=None)
def test_assignment_invariants(n, seed, data):
    w = data.draw(st.integers(1, n - 1))
    N = data.draw(st.integers(1, min(math.comb(n, w), 200)))
    cb = assign_codewords(N, n, w, seed)
    assert cb.words.shape == (N, n)
    assert np.all(cb.words.sum(axis=1) == w)
    assert len({bytes(r) for r in cb.words}) == N
    assert verify_theorem1(cb).ok
    # same seed, same code
    assert np.array_equal(assign_codewords(N, n, w, seed).words, cb.words)


def test_capacity():
    assert assign_codewords(70, 8, 4).N == 70
    with pytest.raises(CapacityExceeded):
        assign_codewords(71, 8, 4)


def test_verify_catches_subset_and_duplicates():
    bad = np.array([[1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 0, 0]])
    v = verify_theorem1(bad)
    assert not v.ok
    assert (0, 1) in v.violations and (0, 2) in v.violations
    assert (0, 2) in v.duplicates
    assert v.unequal_weight == [1]


def test_verify_pairwise_oracle():
    cb = assign_codewords(20, 6, 3, seed=4)
    for s, t in itertools.permutations(range(cb.N), 2):
        assert members_for_source(cb, s) - members_for_source(cb, t)


def test_min_ensemble_size():
    assert min_ensemble_size(20) == 6
    assert min_ensemble_size(50000) == 19
    assert min_ensemble_size(1) == 2
    assert min_ensemble_size(10, "0.25") >= min_ensemble_size(10)
    with pytest.raises(ConfigError):
        min_ensemble_size(10, "1.5")


def test_codebook_json_round_trip(tmp_path):
    cb = assign_codewords(10, 6, 3, seed=9)
    p = tmp_path / "cb.json"
    cb.save(p)
    back = SourceCodebook.load(p)
    assert np.array_equal(back.words, cb.words) and back.n == 6 and back.w == 3 and back.seed == 9


def test_codebook_rejects_malformed():
    with pytest.raises(ConfigError):
        SourceCodebook(4, 2, np.array([[1, 1, 0, 0], [1, 1, 0, 0]]))
    with pytest.raises(ConfigError):
        SourceCodebook(4, 2, np.array([[1, 1, 1, 0]]))
    with pytest.raises(ConfigError):
        SourceCodebook.from_json({"n": 4, "w": 2, "entries": {"0": "1100", "2": "0011"}})
    with pytest.raises(ConfigError):
        parse_bitstring("10a1")


def test_bitstring_round_trip():
    assert parse_bitstring(bitstring((1, 0, 1, 1))) == (1, 0, 1, 1)


def test_splits():
    cb = assign_codewords(4, 4, 2, seed=0)
    sources = np.array([0, 0, 1, 2, 3, 3, 3])
    m = splits_from_codebook(cb, sources)
    for i, split in enumerate(m.splits):
        expect = [d for d, s in enumerate(sources) if cb.words[s, i]]
        assert split.tolist() == expect
    with pytest.raises(UnknownSource):
        splits_from_codebook(cb, [0, 4])
    with pytest.raises(UnknownSource):
        members_for_source(cb, 7)


def test_costs_by_hand():
    c = estimate_costs(100, 10, 5, 20, 1)
    assert (c["rbc"].trainings, c["rbc"].denoiser_calls) == (101, 2020)
    assert (c["abc"].trainings, c["abc"].denoiser_calls) == (10, 10200)
    assert (c["diffabl"].trainings, c["diffabl"].denoiser_calls, c["diffabl"].matvecs) == (10, 2200, 100)
    with pytest.raises(InvalidWeight):
        estimate_costs(10, 4, 4, 5, 1)
    with pytest.raises(ConfigError):
        estimate_costs(10, 4, 2, 0, 1)
