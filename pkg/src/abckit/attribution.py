"""Visual and counterfactual attribution, top-k intersections and their
random baseline."""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._util import make_rng
from .errors import ConfigError, DataError, UnknownSource
from .landscape import get_metric

VISUAL = "visual"
COUNTERFACTUAL = "counterfactual"
DIFFERENTIAL = "differential"
RETRAINING = "retraining"
METHODS = (VISUAL, COUNTERFACTUAL, DIFFERENTIAL, RETRAINING)


@dataclass(frozen=True, eq=False)
class AttributionRanking:
    """Sources ordered most-attributed first.

    ``ascending`` says how scores relate to that order: True when a small
    score means strong attribution (visual distance), False when a large one
    does (counterfactual distance).
    """

    source_ids: np.ndarray
    scores: np.ndarray
    ascending: bool
    method: str
    tied: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attribution method {self.method!r}")
        if self.source_ids.shape != self.scores.shape:
            raise ConfigError("one score per source required")
        if np.unique(self.source_ids).size != self.source_ids.size:
            raise DataError("a ranking lists every source exactly once")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("scores must be finite")

    def __len__(self):
        return self.source_ids.size

    def top(self, k):
        return self.source_ids[:k]

    def position(self, s):
        hit = np.flatnonzero(self.source_ids == s)
        if not hit.size:
            raise UnknownSource(f"source {s!r} not ranked")
        return int(hit[0])


def rank_scores(source_ids, scores, ascending, method):
    """Stable sort by score; equal scores keep ascending source-id order."""
    ids = np.asarray(source_ids, dtype=np.int64)
    sc = np.asarray(scores, dtype=np.float64)
    base = np.argsort(ids, kind="stable")
    ids, sc = ids[base], sc[base]
    key = sc if ascending else -sc
    order = np.argsort(key, kind="stable")
    tied = np.unique(sc).size < sc.size
    return AttributionRanking(ids[order], sc[order], ascending, method, tied)


def _distance_table(sample, data, metric):
    metric = get_metric(metric)
    return np.asarray(metric(np.asarray(sample, dtype=np.float64), data.images.astype(np.float64)),
                      dtype=np.float64)


def visual_scores(sample, data, metric="euclidean-native"):
    """Per-source minimum distance from ``sample`` to that source's images."""
    if data.images.shape[0] == 0:
        raise DataError("dataset is empty")
    dist = _distance_table(sample, data, metric)
    N = data.n_sources
    scores = np.full(N, np.inf)
    np.minimum.at(scores, data.sources, dist)
    return scores


def visual_attribution(sample, data, metric="euclidean-native"):
    scores = visual_scores(sample, data, metric)
    present = np.flatnonzero(np.isfinite(scores))
    return rank_scores(present, scores[present], True, VISUAL)


def visual_attribution_from_table(distances, sources):
    """Same ranking from a precomputed per-image distance table, so other
    metrics can be plugged in without touching this module."""
    d = np.asarray(distances, dtype=np.float64)
    src = np.asarray(sources, dtype=np.int64)
    if d.shape != src.shape or d.size == 0:
        raise ConfigError("need one distance per image")
    scores = np.full(int(src.max()) + 1, np.inf)
    np.minimum.at(scores, src, d)
    present = np.flatnonzero(np.isfinite(scores))
    return rank_scores(present, scores[present], True, VISUAL)


def counterfactual_attribution(l, method=None):
    """Largest counterfactual displacement first."""
    if len(l) == 0:
        raise DataError("empty landscape")
    method = method or (DIFFERENTIAL if l.approximate else COUNTERFACTUAL)
    return rank_scores(l.source_ids, l.distances, False, method)


def visual_similarity_rank(data, sample, s, metric="euclidean-native"):
    """Normalised visual rank of source ``s``: 0 = most similar, 1 = least.
    Tied sources share their average rank."""
    scores = visual_scores(sample, data, metric)
    if not (0 <= s < scores.size) or not np.isfinite(scores[s]):
        raise UnknownSource(f"source {s!r} has no images")
    present = np.isfinite(scores)
    if present.sum() < 2:
        raise DataError("ranks need at least two sources")
    ranks = rankdata(scores[present], method="average") - 1.0
    idx = int(np.flatnonzero(np.flatnonzero(present) == s)[0])
    return float(ranks[idx] / (present.sum() - 1))


def flip_agnostic_euclidean(a, b):
    """Euclidean distance, minimised over a horizontal flip of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a - b[..., ::-1])))


def topk_intersection(v, c, k):
    if set(v.source_ids.tolist()) != set(c.source_ids.tolist()):
        raise ConfigError("rankings cover different sources")
    if not 1 <= k <= len(v):
        raise ConfigError(f"k={k} outside 1..{len(v)}")
    return bool(np.intersect1d(v.top(k), c.top(k)).size)


def intersection_probability(N, k):
    """Chance that a random top-k list meets a fixed top-k set of N sources.

    Null model: each of the k entries of the second list is an independent
    uniform draw over the N sources, so each one misses the fixed set with
    probability 1 - k/N and all of them miss with (1 - k/N)^k.  (Drawing
    the second list without replacement would give 1 - C(N-k, k)/C(N, k),
    slightly larger.)
    """
    if not 1 <= k <= N:
        raise ConfigError(f"need 1 <= k <= N, got k={k}, N={N}")
    return 1.0 - (1.0 - k / N) ** k


def intersection_baseline(N, k, trials):
    """Binomial mean and sd of the hit count under the random model."""
    p = intersection_probability(N, k)
    return trials * p, math.sqrt(trials * p * (1.0 - p))


def simulate_intersections(N, k, trials, seed=0):
    """Monte Carlo hit count for the same model: a random k-subset against
    k independent uniform picks."""
    if not 1 <= k <= N:
        raise ConfigError(f"need 1 <= k <= N, got k={k}, N={N}")
    rng = make_rng(seed, "intersection-mc")
    hits = 0
    for start in range(0, trials, 4096):
        b = min(4096, trials - start)
        fixed = np.argsort(rng.random((b, N)), axis=1)[:, :k]
        picks = rng.integers(0, N, size=(b, k))
        hits += int(np.any((picks[:, :, None] == fixed[:, None, :]).any(axis=2), axis=1).sum())
    return hits


@dataclass(frozen=True)
class IntersectionStat:
    k: int
    trials: int
    hits: int
    baseline_mean: float
    baseline_sd: float

    def __post_init__(self):
        if not 0 <= self.hits <= self.trials:
            raise DataError(f"hits {self.hits} outside 0..{self.trials}")

    @property
    def z(self):
        if self.baseline_sd == 0:
            return math.nan
        return (self.hits - self.baseline_mean) / self.baseline_sd

    def to_json(self):
        return {"k": self.k, "trials": self.trials, "hits": self.hits, "baseline_mean": self.baseline_mean,
                "baseline_sd": self.baseline_sd, "z": None if math.isnan(self.z) else self.z}


def intersection_stat(visual, counterfactual, k):
    """Count top-k hits over paired rankings (one pair per sample)."""
    if len(visual) != len(counterfactual):
        raise ConfigError("need one counterfactual ranking per visual ranking")
    if not visual:
        raise DataError("no rankings")
    hits = sum(topk_intersection(v, c, k) for v, c in zip(visual, counterfactual))
    mean, sd = intersection_baseline(len(visual[0]), k, len(visual))
    return IntersectionStat(k, len(visual), hits, mean, sd)


def write_attribution_csv(path, rankings):
    """``rankings`` maps sample id to a list of AttributionRanking."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "method", "rank", "source_id", "score"])
        for sid in sorted(rankings):
            for r in rankings[sid]:
                for pos, (s, sc) in enumerate(zip(r.source_ids, r.scores)):
                    w.writerow([sid, r.method, pos, int(s), repr(float(sc))])


def write_summary_json(path, stats, extra=None):
    doc = {"intersections": {name: st.to_json() for name, st in stats.items()}}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
