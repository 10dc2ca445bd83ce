"""Ensembles of denoisers: mean and coefficient-weighted prediction,
codebook-driven ablation masks, training and on-disk layout."""

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import parallel_map
from .codebook import SourceCodebook, splits_from_codebook
from .diffusion import load_checkpoint, predict, save_checkpoint, train_denoiser
from .diffusion.schedule import Schedule
from .errors import ConfigError, DataError, EmptyMask

_SCALE_SNAP = 8 * np.finfo(np.float64).eps


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    members: tuple
    schedule: Schedule
    codebook: SourceCodebook
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        arch = self.members[0].arch
        if any(m.arch != arch for m in self.members):
            raise ConfigError("all members must share one architecture")
        if self.codebook is not None and self.codebook.n != len(self.members):
            raise ConfigError(f"codebook is for {self.codebook.n} members, ensemble has {len(self.members)}")

    @property
    def n(self):
        return len(self.members)

    @property
    def image_shape(self):
        a = self.members[0].arch
        return (a.channels, a.side, a.side)


def _check_mask(mask, n):
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != (n,):
        raise ConfigError(f"mask has shape {keep.shape}, ensemble has {n} members")
    if not keep.any():
        raise EmptyMask("ablation mask keeps no members")
    return keep


def mask_to_coefficients(mask):
    """Coefficients under which the weighted ensemble equals the mean of
    the kept members: n/|kept| for kept members, 0 for ablated ones."""
    keep = _check_mask(mask, np.size(mask))
    n = keep.size
    return np.where(keep, n / keep.sum(), 0.0)


def full_mask(n):
    return np.ones(n, dtype=bool)


def _scale(row, n):
    s = math.fsum(row) / n
    # sums of n/k repeated k times can land one ulp off 1
    return 1.0 if abs(s - 1.0) <= _SCALE_SNAP else s


def accumulate(m, total, f, c):
    """Fold member output ``f`` with weight ``c`` > 0 into running mean ``m``."""
    total = total + c
    if total == c:
        return f.copy(), total
    return m + (c / total) * (f - m), total


def finish(m, coeffs, n):
    s = _scale(coeffs, n)
    return m if s == 1.0 else m * s


def predict_rows(e, coeffs, x, t):
    """Weighted ensemble prediction with one coefficient vector per row.

    Computes sum_i f_i(x) * c_i / n for each row.  Non-negative rows are
    evaluated as (sum(c)/n) times a running weighted mean over members in
    ascending index order, so equal member outputs pass through unchanged
    bit for bit; members with a zero coefficient are not evaluated.  Rows
    with negative entries fall back to the plain weighted sum.
    """
    C = np.asarray(coeffs, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if C.ndim != 2 or C.shape != (x.shape[0], e.n):
        raise ConfigError(f"coefficient matrix {C.shape} does not fit {x.shape[0]} rows x {e.n} members")
    if not np.all(np.isfinite(C)):
        raise ConfigError("coefficients must be finite")
    out = np.zeros_like(x)
    mean_rows = np.flatnonzero(np.all(C >= 0, axis=1) & (C.sum(axis=1) > 0))
    plain_rows = np.setdiff1d(np.arange(x.shape[0]), mean_rows)
    if mean_rows.size:
        m = np.zeros((mean_rows.size,) + x.shape[1:])
        W = np.zeros(mean_rows.size)
        for i, member in enumerate(e.members):
            local = np.flatnonzero(C[mean_rows, i] > 0)
            if not local.size:
                continue
            f = predict(member, x[mean_rows[local]], t)
            for j, r in enumerate(local):
                m[r], W[r] = accumulate(m[r], W[r], f[j], C[mean_rows[r], i])
        for j, r in enumerate(mean_rows):
            out[r] = finish(m[j], C[r], e.n)
    for r in plain_rows:
        for i, member in enumerate(e.members):
            if C[r, i] != 0:
                out[r] = out[r] + predict(member, x[r], t) * (C[r, i] / e.n)
    return out


def predict_weighted(e, c, x, t):
    """(f . c)(x) = sum_i f_i(x) c_i / n for a single image."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (e.n,):
        raise ConfigError(f"coefficient vector has length {c.size}, ensemble has {e.n} members")
    return predict_rows(e, c[None], np.asarray(x)[None], t)[0]


def predict_mean(e, mask, x, t):
    """Mean prediction of the kept members."""
    return predict_weighted(e, mask_to_coefficients(_check_mask(mask, e.n)), x, t)


def ablation_mask_for_source(e, s):
    """Keep every member except those whose split holds source ``s``."""
    cb = e.codebook
    cb._check_source(s)
    return cb.words[s] == 0


def ensemble_predictor(e, coeffs):
    """``predict(x, t)`` closure for the sampler; ``coeffs`` is (rows, n)."""
    C = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))

    def run(x, t):
        return predict_rows(e, C, x, t)

    return run


def member_seed(seed, i):
    return int(seed) ^ int(i)


def train_ensemble(data, cb, cfg, sched, threads=None):
    """Train member i on split i with seed ``cfg.seed ^ i``."""
    manifest_splits = splits_from_codebook(cb, data.sources)

    def fit(i):
        split = manifest_splits.splits[i]
        if split.size == 0:
            raise DataError(f"member {i} has an empty training split")
        return train_denoiser(data.subset(split), replace(cfg, seed=member_seed(cfg.seed, i)), sched, member=i)

    results = parallel_map(fit, range(cb.n), threads)
    manifest = {
        "train_config": cfg.to_json(),
        "seeds": [member_seed(cfg.seed, i) for i in range(cb.n)],
        "split_sizes": [int(s.size) for s in manifest_splits.splits],
        "final_losses": [float(np.mean(losses[-20:])) if losses.size else None for _, losses in results],
        "splits": manifest_splits.to_json(),
    }
    return EnsembleModel(tuple(p for p, _ in results), sched, cb, manifest)


def save_ensemble(e, directory):
    os.makedirs(directory, exist_ok=True)
    e.codebook.save(os.path.join(directory, "codebook.json"))
    names = []
    for i, member in enumerate(e.members):
        name = f"member_{i:02d}.ckpt"
        save_checkpoint(os.path.join(directory, name), member, e.schedule)
        names.append(name)
    doc = {
        "codebook": "codebook.json",
        "members": names,
        "schedule": e.schedule.to_json(),
        "seeds": e.manifest.get("seeds"),
        "train_config": e.manifest.get("train_config"),
        "split_sizes": e.manifest.get("split_sizes"),
        "final_losses": e.manifest.get("final_losses"),
    }
    with open(os.path.join(directory, "ensemble.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if "splits" in e.manifest:
        with open(os.path.join(directory, "splits.json"), "w") as fh:
            json.dump(e.manifest["splits"], fh)
            fh.write("\n")
    return [os.path.join(directory, f) for f in ["codebook.json", "ensemble.json", *names]]


def load_ensemble(directory):
    with open(os.path.join(directory, "ensemble.json")) as fh:
        doc = json.load(fh)
    cb = SourceCodebook.load(os.path.join(directory, doc["codebook"]))
    members, sched = [], None
    for name in doc["members"]:
        params, sched = load_checkpoint(os.path.join(directory, name))
        members.append(params)
    manifest = {k: doc.get(k) for k in ("seeds", "train_config", "split_sizes", "final_losses")}
    return EnsembleModel(tuple(members), sched, cb, manifest)
