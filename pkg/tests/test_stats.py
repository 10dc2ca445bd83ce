import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from abckit.errors import ConfigError, DataError
from abckit.stats import is_defined, ols_loglog, pearson, spearman

finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=40))
@settings(max_examples=80, deadline=None)
def test_correlations_match_scipy(pairs):
    x, y = np.array(pairs).T
    r, rho = pearson(x, y), spearman(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        assert not is_defined(r) and not is_defined(rho)
        return
    assert -1 <= r <= 1 and -1 <= rho <= 1
    if is_defined(r) and np.std(x) > 1e-6 and np.std(y) > 1e-6:
        assert math.isclose(r, sps.pearsonr(x, y)[0], abs_tol=1e-7)
    ref = sps.spearmanr(x, y)[0]
    if not np.isnan(ref):
        assert math.isclose(rho, ref, abs_tol=1e-9)


def test_input_checks():
    with pytest.raises(ConfigError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(DataError):
        spearman([1], [1])
    with pytest.raises(DataError):
        pearson([1, np.nan], [1, 2])


def test_ols_recovers_line():
    x = np.log10([64, 64, 256, 256, 1024, 1024])
    y = -0.5 * x + 2 + np.array([0.01, -0.01, 0.02, -0.02, 0.0, 0.0])
    fit = ols_loglog(x, y, permutations=200)
    ref = sps.linregress(x, y)
    assert math.isclose(fit.slope, ref.slope, rel_tol=1e-12)
    assert math.isclose(fit.intercept, ref.intercept, rel_tol=1e-12)
    assert math.isclose(fit.r2, ref.rvalue ** 2, rel_tol=1e-12)
    # 6 points, 3 distinct x values: only a handful of labellings beat the truth
    assert fit.p_perm < 0.1


def test_ols_null_and_degenerate():
    rng = np.random.default_rng(0)
    x = np.repeat([1.0, 2.0, 3.0], 30)
    fit = ols_loglog(x, rng.standard_normal(90), permutations=300, seed=1)
    assert fit.p_perm > 0.01
    y = rng.standard_normal(90)
    assert ols_loglog(x, y, 300, 5) == ols_loglog(x, y, 300, 5)
    with pytest.raises(DataError):
        ols_loglog([1, 1, 1], [1, 2, 3])


def test_p_never_zero():
    x = np.arange(30.0)
    fit = ols_loglog(x, 2 * x, permutations=99)
    assert fit.p_perm == pytest.approx(1 / 100)
