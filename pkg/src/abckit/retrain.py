"""Retraining-based counterfactuals: one full model plus a leave-one-out
model per source, all trained from the same initialisation on the same
minibatch plan."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ._util import parallel_map
from .attribution import RETRAINING, counterfactual_attribution, intersection_stat
from .dataset import _RawSubset
from .diffusion import TrainConfig, load_checkpoint, predict, sample, save_checkpoint, train_denoiser
from .errors import ConfigError, UnknownSource
from .landscape import CounterfactualLandscape, get_metric

MAX_SOURCES = 64
BLACK = "black"


@dataclass(frozen=True, eq=False)
class RbcSuite:
    full: object
    loo: tuple  # loo[s] was trained with source s blacked out
    config: object
    schedule: object
    replacement: str = BLACK
    fill_value: float = -1.0
    manifest: dict = field(default_factory=dict)

    @property
    def N(self):
        return len(self.loo)

    def model(self, s):
        if not 0 <= s < self.N:
            raise UnknownSource(f"no leave-one-out model for source {s!r}")
        return self.loo[s]


def blackout(data, s, fill_value=None):
    """Copy of the training images with source ``s`` replaced by the
    darkest representable value; shapes and positions are untouched."""
    fill = data.value_range[0] if fill_value is None else fill_value
    images = np.array(data.images, dtype=np.float32)
    images[data.sources == s] = fill
    return _RawSubset(images, np.asarray(data.sources), data.value_range)


def train_rbc_suite(data, cfg, sched, max_sources=MAX_SOURCES, threads=None):
    """Full model plus N leave-one-out models.

    Every run uses ``cfg.seed``, so the initial parameters, the minibatch
    plan and the injected training noise are shared.  Optimizer state
    starts fresh in each run.
    """
    N = data.n_sources
    if max_sources is not None and N > max_sources:
        raise ConfigError(f"{N} sources would need {N + 1} trainings; the guard allows {max_sources} "
                          "(raise max_sources to override)")
    fill = float(data.value_range[0])
    jobs = [None] + list(range(N))

    def fit(s):
        split = data if s is None else blackout(data, s, fill)
        return train_denoiser(split, cfg, sched)

    results = parallel_map(fit, jobs, threads)
    manifest = {
        "train_config": cfg.to_json(),
        "seed": cfg.seed,
        "optimizer_state": "fresh per run",
        "replacement": BLACK,
        "fill_value": fill,
        "datum_sources": bool(np.unique(data.sources).size == data.sources.size),
        "steps": [int(l.size) for _, l in results],
    }
    return RbcSuite(results[0][0], tuple(p for p, _ in results[1:]), cfg, sched, BLACK, fill, manifest)


def _single(params):
    def run(x, t):
        return predict(params, x, t)
    return run


def rbc_factual(suite, noise, mode=None):
    return sample(_single(suite.full), suite.schedule, noise, mode, batch=1)[0]


def rbc_counterfactual(suite, s, noise, mode=None):
    """Replay ``noise`` through the model retrained without source ``s``."""
    return sample(_single(suite.model(s)), suite.schedule, noise, mode, batch=1)[0]


def rbc_landscape(suite, noise, metric="euclidean", keep_images=False, threads=None, mode=None):
    metric = get_metric(metric)
    factual = rbc_factual(suite, noise, mode)
    cfs = np.stack(parallel_map(lambda s: rbc_counterfactual(suite, s, noise, mode), range(suite.N), threads))
    return CounterfactualLandscape(
        factual=factual,
        source_ids=np.arange(suite.N),
        distances=np.asarray(metric(factual, cfs), dtype=np.float64),
        metric=metric.name,
        eps_seed=noise.seed,
        mode=mode or noise.mode,
        canonical=metric.canonical,
        counterfactuals=cfs if keep_images else None,
    )


def rbc_attribution(l):
    return counterfactual_attribution(l, method=RETRAINING)


def compare_paradigms(abc_reports, rbc_reports, visual_reports, k, rbc_visual=None):
    """Top-k visual/counterfactual hit counts for both paradigms.

    Each argument is a list of AttributionRanking, one per generated sample,
    in the same sample order.  The two paradigms sample from different
    models, so the retrained model's factuals usually have their own visual
    rankings; pass them as ``rbc_visual`` (default: ``visual_reports``).
    """
    rbc_visual = visual_reports if rbc_visual is None else rbc_visual
    if not (len(abc_reports) == len(rbc_reports) == len(visual_reports) == len(rbc_visual)):
        raise ConfigError("abc, rbc and visual reports must cover the same samples")
    abc = intersection_stat(visual_reports, abc_reports, k)
    rbc = intersection_stat(rbc_visual, rbc_reports, k)
    return {
        "abc_hits": abc.hits,
        "rbc_hits": rbc.hits,
        "baseline": (abc.baseline_mean, abc.baseline_sd),
        "abc_z": abc.z,
        "rbc_z": rbc.z,
        "abc": abc,
        "rbc": rbc,
    }


def save_rbc_suite(suite, directory):
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(os.path.join(directory, "full.ckpt"), suite.full, suite.schedule)
    names = []
    for s, params in enumerate(suite.loo):
        name = f"loo_{s}.ckpt"
        save_checkpoint(os.path.join(directory, name), params, suite.schedule)
        names.append(name)
    doc = dict(suite.manifest, full="full.ckpt", loo=names, schedule=suite.schedule.to_json())
    with open(os.path.join(directory, "rbc.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return [os.path.join(directory, f) for f in ["rbc.json", "full.ckpt", *names]]


def load_rbc_suite(directory):
    with open(os.path.join(directory, "rbc.json")) as fh:
        doc = json.load(fh)
    full, sched = load_checkpoint(os.path.join(directory, doc["full"]))
    loo = tuple(load_checkpoint(os.path.join(directory, n))[0] for n in doc["loo"])
    cfg = TrainConfig(**doc["train_config"]) if doc.get("train_config") else None
    manifest = {k: v for k, v in doc.items() if k not in ("full", "loo", "schedule")}
    return RbcSuite(full, loo, cfg, sched, doc.get("replacement", BLACK), doc.get("fill_value", -1.0), manifest)
