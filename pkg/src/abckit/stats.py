"""Correlation and regression helpers.

Undefined correlations (a constant input) come back as NaN rather than
raising; :func:`is_defined` is the check callers should use.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._util import make_rng
from .errors import ConfigError, DataError


def _pair(xs, ys, least=2):
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ConfigError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < least:
        raise DataError(f"need at least {least} points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("inputs must be finite")
    return x, y


def _corr(x, y):
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def pearson(xs, ys):
    """Product-moment correlation; NaN if either input is constant."""
    return _corr(*_pair(xs, ys))


def spearman(xs, ys):
    """Pearson correlation of average ranks; NaN if either input is constant."""
    x, y = _pair(xs, ys)
    return _corr(rankdata(x), rankdata(y))


def is_defined(r):
    return not math.isnan(r)


@dataclass(frozen=True)
class OlsFit:
    slope: float
    intercept: float
    r2: float
    p_perm: float
    permutations: int


def _slope(x, y):
    dx = x - x.mean()
    return float(np.dot(dx, y - y.mean()) / np.dot(dx, dx))


def ols_loglog(xs, ys, permutations=1000, seed=0):
    """Least-squares line through (xs, ys) with a two-sided permutation p-value.

    The caller takes logs first; the name records the intended use.  The
    p-value counts the observed labelling as one of the permutations, so it
    is never exactly zero.
    """
    x, y = _pair(xs, ys, least=3)
    if np.all(x == x[0]):
        raise DataError("all x values are equal; slope undefined")
    slope = _slope(x, y)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    syy = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if syy == 0 else 1.0 - float(np.sum(resid * resid)) / syy
    rng = make_rng(seed, "ols-permutation")
    hits = 1
    observed = abs(slope)
    for _ in range(permutations):
        if abs(_slope(x, rng.permutation(y))) >= observed * (1 - 1e-12):
            hits += 1
    return OlsFit(slope, intercept, r2, hits / (permutations + 1), permutations)
