"""Constant-weight code assignments of data sources to ensemble members.

A source's codeword has one bit per ensemble member; member ``i`` trains on
every datum whose source has bit ``i`` set.  Because all codewords share
one Hamming weight and are distinct, no source's member set contains
another's, so ablating the members trained on one source always leaves a
member trained on each other source.
"""

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from ._util import make_rng
from .errors import CapacityExceeded, ConfigError, InvalidWeight, UnknownSource

MAX_MEMBERS = 64
_FULL_SHUFFLE_LIMIT = 1 << 22


def _check_weight(n, w):
    if not 1 <= n <= MAX_MEMBERS:
        raise InvalidWeight(f"member count must lie in [2, {MAX_MEMBERS}], got {n}")
    if not 1 <= w < n:
        raise InvalidWeight(f"codeword weight must lie in [1, n-1] = [1, {n - 1}], got {w}")


def bitstring(word):
    return "".join(str(int(b)) for b in word)


def parse_bitstring(text):
    if not text or set(text) - {"0", "1"}:
        raise ConfigError(f"bad codeword {text!r}")
    return tuple(int(ch) for ch in text)


def enumerate_constant_weight(n, w):
    """All weight-``w`` words of length ``n`` in lexicographic order.

    Bit 0 is the most significant (leftmost) position, so the list is
    ascending when read as binary numbers.
    """
    _check_weight(n, w)
    words = []
    # Ones placed as far right as possible first gives ascending order.
    for ones in combinations(range(n), w):
        word = [0] * n
        for pos in ones:
            word[pos] = 1
        words.append(tuple(word))
    words.reverse()
    return words


def unrank_constant_weight(n, w, rank):
    """The ``rank``-th word of :func:`enumerate_constant_weight` without
    building the list."""
    total = math.comb(n, w)
    if not 0 <= rank < total:
        raise IndexError(rank)
    word = []
    remaining = w
    for pos in range(n):
        slots = n - pos - 1
        # words with a 0 here come first
        zeros_first = math.comb(slots, remaining)
        if remaining == 0 or rank < zeros_first:
            word.append(0)
        else:
            rank -= zeros_first
            word.append(1)
            remaining -= 1
    return tuple(word)


def _weight_for(n, rule):
    if rule == "half":
        w = n // 2
    else:
        w = math.floor(float(rule) * n)
    return min(max(w, 1), n - 1)


def min_ensemble_size(N, weight_rule="half"):
    """Smallest ensemble size whose weight-w(n) code holds ``N`` codewords.

    ``weight_rule`` is ``"half"`` (w = floor(n/2)) or a fraction ``r`` in
    (0, 1) giving w = floor(r*n); either way w is clamped into [1, n-1].
    """
    if N < 1:
        raise ConfigError("N must be at least 1")
    if weight_rule != "half" and not 0 < float(weight_rule) < 1:
        raise ConfigError(f"weight fraction must lie in (0, 1), got {weight_rule}")
    for n in range(2, MAX_MEMBERS + 1):
        if math.comb(n, _weight_for(n, weight_rule)) >= N:
            return n
    raise CapacityExceeded(f"{N} sources need more than {MAX_MEMBERS} members")


def default_weight(n):
    return _weight_for(n, "half")


@dataclass(frozen=True)
class SourceCodebook:
    n: int
    w: int
    words: np.ndarray  # (N, n) uint8, row s = codeword of source s
    seed: int | None = None

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.uint8)
        if words.ndim != 2 or words.shape[1] != self.n:
            raise ConfigError(f"codeword matrix must be (N, {self.n}), got {words.shape}")
        _check_weight(self.n, self.w)
        if np.any(words > 1):
            raise ConfigError("codewords must be binary")
        weights = words.sum(axis=1)
        if np.any(weights != self.w):
            bad = int(np.flatnonzero(weights != self.w)[0])
            raise ConfigError(f"source {bad} has weight {weights[bad]}, expected {self.w}")
        if len({bytes(r) for r in words}) != len(words):
            raise ConfigError("codewords must be distinct")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def N(self):
        return self.words.shape[0]

    def codeword(self, s):
        self._check_source(s)
        return tuple(int(b) for b in self.words[s])

    def _check_source(self, s):
        if not (isinstance(s, (int, np.integer)) and 0 <= s < self.N):
            raise UnknownSource(f"unknown source {s!r} (codebook has {self.N})")

    def to_json(self):
        return {
            "n": self.n,
            "w": self.w,
            "seed": self.seed,
            "entries": {str(s): bitstring(row) for s, row in enumerate(self.words)},
        }

    @classmethod
    def from_json(cls, obj):
        try:
            entries = obj["entries"]
            ids = sorted(int(k) for k in entries)
            if ids != list(range(len(ids))):
                raise ConfigError("codebook source ids must be dense 0..N-1")
            words = [parse_bitstring(entries[str(s)]) for s in ids]
            return cls(int(obj["n"]), int(obj["w"]), np.array(words, dtype=np.uint8).reshape(len(ids), int(obj["n"])),
                       obj.get("seed"))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed codebook: {exc}") from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def assign_codewords(N, n, w=None, seed=0):
    """Give each of ``N`` sources a distinct weight-``w`` codeword.

    The chosen words are the first ``N`` entries of a seeded shuffle of the
    lexicographic enumeration.
    """
    w = default_weight(n) if w is None else w
    _check_weight(n, w)
    capacity = math.comb(n, w)
    if N > capacity:
        raise CapacityExceeded(f"{N} sources exceed the {capacity} weight-{w} codewords of length {n}")
    if N < 1:
        raise ConfigError("need at least one source")
    rng = make_rng(seed, "codebook")
    if capacity <= _FULL_SHUFFLE_LIMIT:
        ranks = rng.permutation(capacity)[:N]
    else:
        ranks = rng.choice(capacity, size=N, replace=False)
    words = np.array([unrank_constant_weight(n, w, int(r)) for r in ranks], dtype=np.uint8)
    return SourceCodebook(n, w, words, seed)


@dataclass(frozen=True)
class SplitManifest:
    splits: tuple  # per member, sorted int64 arrays of datum indices
    datum_sources: np.ndarray = field(repr=False)

    def to_json(self):
        return {str(i): [int(d) for d in split] for i, split in enumerate(self.splits)}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")


def splits_from_codebook(cb, datum_sources):
    sources = np.asarray(datum_sources, dtype=np.int64)
    if sources.size and (sources.min() < 0 or sources.max() >= cb.N):
        bad = sources[(sources < 0) | (sources >= cb.N)][0]
        raise UnknownSource(f"datum source {int(bad)} not in codebook of {cb.N} sources")
    member_bits = cb.words[sources] if sources.size else np.zeros((0, cb.n), np.uint8)
    splits = tuple(np.flatnonzero(member_bits[:, i]).astype(np.int64) for i in range(cb.n))
    return SplitManifest(splits, sources)


def members_for_source(cb, s):
    cb._check_source(s)
    return frozenset(int(i) for i in np.flatnonzero(cb.words[s]))


@dataclass(frozen=True)
class TheoremVerdict:
    violations: list  # ordered pairs (s, s2) with S(s) a subset of S(s2)
    duplicates: list  # pairs of sources sharing a codeword
    unequal_weight: list  # sources whose weight differs from the first source

    @property
    def ok(self):
        return not (self.violations or self.duplicates or self.unequal_weight)


def verify_theorem1(cb, chunk=2048):
    """Check every ordered pair of distinct sources for a non-empty set
    difference of member sets.

    Accepts a :class:`SourceCodebook` or any 0/1 matrix (one row per source),
    which is how malformed codes get checked.  Also re-checks the premises
    the guarantee rests on: distinct codewords and equal weights.
    """
    bits = np.asarray(cb.words if isinstance(cb, SourceCodebook) else cb, dtype=np.int64)
    if bits.ndim != 2:
        bits = bits.reshape(len(bits), -1)
    N = bits.shape[0]
    weights = bits.sum(axis=1)
    unequal = [int(s) for s in np.flatnonzero(weights != weights[0])] if N else []
    violations, duplicates = [], []
    complement = 1 - bits
    for start in range(0, N, chunk):
        block = bits[start:start + chunk]
        # only_in[s, s2] = |S(s) minus S(s2)|
        only_in = block @ complement.T
        rows, cols = np.nonzero(only_in == 0)
        for r, s2 in zip(rows, cols):
            s = start + int(r)
            if s == s2:
                continue
            violations.append((s, int(s2)))
            if s < s2 and weights[s] == weights[s2]:
                duplicates.append((s, int(s2)))
    return TheoremVerdict(violations, duplicates, unequal)


@dataclass(frozen=True)
class CostEstimate:
    trainings: int
    denoiser_calls: int
    matvecs: int = 0


def estimate_costs(N, n, w, K, n_samples):
    """Unit-operation counts for enumerating ``n_samples`` full landscapes.

    Retraining trains N+1 models and samples each of them once per sample.
    Ablation trains n members; each sample costs one full-ensemble run plus
    N runs of the n-w surviving members.  Differential ablation replaces
    the N runs with n tangent passes (n member calls per step each) and one
    Jacobian-vector product per source.
    """
    for name, v in (("N", N), ("n", n), ("w", w), ("K", K), ("n_samples", n_samples)):
        if v < 1:
            raise ConfigError(f"{name} must be at least 1")
    if w >= n:
        raise InvalidWeight(f"weight {w} must be below member count {n}")
    return {
        "rbc": CostEstimate(N + 1, n_samples * (N + 1) * K),
        "abc": CostEstimate(n, n_samples * K * (n + N * (n - w))),
        "diffabl": CostEstimate(n, n_samples * K * n * (n + 1), n_samples * N),
    }
