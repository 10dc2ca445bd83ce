"""Exact counterfactual landscapes by per-source ablation.

The factual sample and every counterfactual share one exogenous-noise
record; only the set of surviving ensemble members changes.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._util import parallel_map
from .dataset import binarize, write_tensor
from .diffusion import sample
from .ensemble import ablation_mask_for_source, ensemble_predictor, mask_to_coefficients
from .errors import ConfigError, DataError, UnknownSource

CANONICAL_SIDE = 32

ATTRIBUTABLE = "attributable"
NEARLY_UNATTRIBUTABLE = "nearly-unattributable"
UNATTRIBUTABLE = "unattributable"


def to_canonical(x, side=CANONICAL_SIDE):
    """Nearest-neighbour resample the last two axes to ``side`` x ``side``."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if (h, w) == (side, side):
        return x
    if side % h == 0 and side % w == 0:
        return np.repeat(np.repeat(x, side // h, axis=-2), side // w, axis=-1)
    rows = (np.arange(side) * h) // side
    cols = (np.arange(side) * w) // side
    return x[..., rows[:, None], cols[None, :]]


@dataclass(frozen=True)
class Metric:
    """Distance from one reference image to each row of a batch."""

    name: str
    fn: object
    canonical: bool = False
    discrete: bool = False

    def __call__(self, ref, batch):
        return self.fn(np.asarray(ref), np.asarray(batch))


def _euclid(ref, batch):
    ref = np.asarray(ref, dtype=np.float64)
    batch = np.asarray(batch, dtype=np.float64).reshape((-1,) + ref.shape)
    diff = (batch - ref).reshape(batch.shape[0], -1)
    return np.sqrt(np.sum(diff * diff, axis=1))


def euclidean(canonical_side=CANONICAL_SIDE):
    if canonical_side is None:
        return Metric("euclidean-native", _euclid)

    def fn(ref, batch):
        return _euclid(to_canonical(ref, canonical_side), to_canonical(batch, canonical_side))

    return Metric("euclidean", fn, canonical=True)


def _flip_euclid(ref, batch):
    ref = np.asarray(ref, dtype=np.float64)
    batch = np.asarray(batch, dtype=np.float64).reshape((-1,) + ref.shape)
    return np.minimum(_euclid(ref, batch), _euclid(ref, batch[..., ::-1]))


def flip_euclidean():
    """Euclidean distance minimised over a horizontal flip of the batch."""
    return Metric("flip-euclidean", _flip_euclid)


def exact_match():
    """Number of differing pixels; meant for binarized images."""

    def fn(ref, batch):
        ref = np.asarray(ref)
        batch = np.asarray(batch).reshape((-1,) + ref.shape)
        return np.count_nonzero((batch != ref).reshape(batch.shape[0], -1), axis=1).astype(np.float64)

    return Metric("exact", fn, discrete=True)


def scaled(metric, a):
    return Metric(f"{a}*{metric.name}", lambda r, b: a * metric(r, b), metric.canonical, metric.discrete)


METRICS = {"euclidean": euclidean, "euclidean-native": lambda: euclidean(None), "exact": exact_match,
           "flip-euclidean": flip_euclidean}


def get_metric(metric):
    if isinstance(metric, Metric):
        return metric
    if callable(metric):
        return Metric(getattr(metric, "__name__", "custom"), metric)
    try:
        return METRICS[metric]()
    except KeyError:
        raise ConfigError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}") from None


@dataclass(frozen=True, eq=False)
class CounterfactualLandscape:
    factual: np.ndarray
    source_ids: np.ndarray
    distances: np.ndarray
    metric: str
    eps_seed: int
    mode: str
    canonical: bool = True
    counterfactuals: np.ndarray | None = field(default=None, repr=False)
    approximate: bool = False
    binarized: bool = False

    def __post_init__(self):
        if self.distances.shape != self.source_ids.shape:
            raise ConfigError("one distance per source required")
        if not np.all(np.isfinite(self.distances)):
            raise DataError("landscape distances must be finite")

    def __len__(self):
        return self.source_ids.size

    def factual_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.factual, dtype=np.float64).tobytes()).hexdigest()


def _sample_with(e, coeffs, noise, mode=None):
    coeffs = np.atleast_2d(coeffs)
    return sample(ensemble_predictor(e, coeffs), e.schedule, noise, mode, batch=coeffs.shape[0])


def generate_factual(e, noise, mode=None):
    """Sample with every member kept."""
    return _sample_with(e, np.ones(e.n), noise, mode)[0]


def generate_counterfactual(e, s, noise, mode=None):
    """Sample with the members trained on source ``s`` ablated, same noise."""
    mask = ablation_mask_for_source(e, s)
    return _sample_with(e, mask_to_coefficients(mask), noise, mode)[0]


def generate_with_mask(e, mask, noise, mode=None):
    return _sample_with(e, mask_to_coefficients(mask), noise, mode)[0]


def enumerate_landscape(e, noise, metric="euclidean", keep_images=False, binarize_threshold=None,
                        chunk=64, threads=None, mode=None):
    """Factual sample plus one counterfactual per source, ordered by id.

    Sources are processed in batched chunks, possibly in parallel; rows never
    interact, so the chunking has no effect on the result.  With
    ``binarize_threshold`` set, every sample is binarized before distances
    are taken (use with the ``exact`` metric for discrete-space runs).
    """
    metric = get_metric(metric)
    N = e.codebook.N
    factual = generate_factual(e, noise, mode)
    coeffs = np.stack([mask_to_coefficients(ablation_mask_for_source(e, s)) for s in range(N)])
    starts = list(range(0, N, chunk))
    parts = parallel_map(lambda a: _sample_with(e, coeffs[a:a + chunk], noise, mode), starts, threads)
    cfs = np.concatenate(parts, axis=0)
    if binarize_threshold is not None:
        factual = binarize(factual, binarize_threshold)
        cfs = binarize(cfs, binarize_threshold)
    dist = metric(factual, cfs)
    return CounterfactualLandscape(
        factual=factual,
        source_ids=np.arange(N),
        distances=np.asarray(dist, dtype=np.float64),
        metric=metric.name,
        eps_seed=noise.seed,
        mode=mode or noise.mode,
        canonical=metric.canonical,
        counterfactuals=cfs if keep_images else None,
        binarized=binarize_threshold is not None,
    )


@dataclass(frozen=True)
class RadiusReport:
    radius: float
    argmax: int
    tau: float | None = None
    verdict: str | None = None


def counterfactual_radius(l, tau=None, discrete=None):
    """Largest factual-to-counterfactual distance; ties go to the lowest id."""
    if len(l) == 0:
        raise DataError("empty landscape")
    i = int(np.argmax(l.distances))  # first maximum = lowest source id
    radius = float(l.distances[i])
    report = RadiusReport(radius, int(l.source_ids[i]))
    if tau is not None:
        discrete = l.binarized if discrete is None else discrete
        report = RadiusReport(radius, report.argmax, float(tau), classify_attributability(report, tau, discrete))
    return report


def classify_attributability(r, tau, discrete=False):
    """Zero radius in a discrete space certifies non-attributability; below
    ``tau`` is only near-unattributability."""
    if tau < 0:
        raise ConfigError("tau must be non-negative")
    if discrete and r.radius == 0:
        return UNATTRIBUTABLE
    if r.radius < tau:
        return NEARLY_UNATTRIBUTABLE
    return ATTRIBUTABLE


def distance_ranks(distances):
    """Average ranks scaled to [0, 1]; 0 = smallest distance."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size < 2:
        raise DataError("ranks need at least two entries")
    return (rankdata(d, method="average") - 1.0) / (d.size - 1)


def counterfactual_distance_rank(l, s):
    hit = np.flatnonzero(l.source_ids == s)
    if hit.size == 0:
        raise UnknownSource(f"source {s!r} not in landscape")
    if len(l) < 2:
        raise DataError("distance rank needs at least two sources")
    return float(distance_ranks(l.distances)[hit[0]])


class NotBinarized(DataError):
    pass


def certificate_check(l, discrete=True):
    """True iff every counterfactual equals the factual bit for bit."""
    if l.counterfactuals is None:
        raise DataError("landscape was enumerated without keep_images")
    if discrete:
        for arr in (l.factual, l.counterfactuals):
            if not np.all((arr == 0) | (arr == 1)):
                raise NotBinarized("certificate check needs binarized images")
    return bool(np.all(l.counterfactuals == l.factual[None]))


def save_landscape(l, path, tau=None, keep_images=False):
    """CSV ``source_id,distance`` plus ``<path>.json`` sidecar and, optionally,
    ``<path>.abcd`` holding the factual (id 0xFFFFFFFF) then the counterfactuals."""
    report = counterfactual_radius(l, tau)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "distance"])
        for s, d in zip(l.source_ids, l.distances):
            w.writerow([int(s), repr(float(d))])
    side = {
        "factual_sha256": l.factual_hash(),
        "eps_seed": l.eps_seed,
        "mode": l.mode,
        "metric": l.metric,
        "canonical_resolution": l.canonical,
        "approximate": l.approximate,
        "binarized": l.binarized,
        "tau": tau,
        "radius": report.radius,
        "argmax_source": report.argmax,
        "verdict": report.verdict,
    }
    paths = [path, path + ".json"]
    with open(path + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if keep_images and l.counterfactuals is not None:
        imgs = np.concatenate([l.factual[None], l.counterfactuals]).astype(np.float32)
        ids = np.concatenate([[0xFFFFFFFF], l.source_ids]).astype(np.int64)
        write_tensor(path + ".abcd", imgs, ids, {"rows": "factual, then counterfactuals by source id"})
        paths.append(path + ".abcd")
    return paths


def load_landscape_csv(path):
    ids, dists = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(int(row["source_id"]))
            dists.append(float(row["distance"]))
    side = {}
    if os.path.exists(path + ".json"):
        with open(path + ".json") as fh:
            side = json.load(fh)
    return np.array(ids), np.array(dists), side
