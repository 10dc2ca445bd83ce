import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import binom

from abckit.attribution import (AttributionRanking, IntersectionStat, counterfactual_attribution,
                                flip_agnostic_euclidean, intersection_baseline, intersection_probability,
                                intersection_stat, rank_scores, simulate_intersections, topk_intersection,
                                visual_attribution, visual_attribution_from_table, visual_similarity_rank,
                                write_attribution_csv, write_summary_json)
from abckit.dataset import Dataset
from abckit.errors import ConfigError, DataError, UnknownSource


def _exhaustive_probability(N, k):
    # oracle: enumerate every tuple of k picks against a fixed top-k set
    first = set(range(k))
    tuples = list(itertools.product(range(N), repeat=k))
    return sum(bool(first & set(t)) for t in tuples) / len(tuples)


@pytest.mark.parametrize("N,k", [(5, 1), (6, 2), (8, 3), (9, 4), (10, 5), (7, 4)])
def test_probability_matches_enumeration(N, k):
    assert math.isclose(intersection_probability(N, k), _exhaustive_probability(N, k), rel_tol=1e-12)


@given(st.integers(1, 500).flatmap(lambda N: st.tuples(st.just(N), st.integers(1, N))))
def test_probability_bounds(Nk):
    N, k = Nk
    p = intersection_probability(N, k)
    without = 1 - math.comb(N - k, k) / math.comb(N, k)
    assert k / N - 1e-12 <= p <= without + 1e-12


def test_baseline_table_values():
    mean, sd = intersection_baseline(384, 8, 1024)
    assert round(mean, 2) == 158.73 and round(sd, 2) == 11.58
    p = intersection_probability(384, 8)
    assert math.isclose(mean, binom.mean(1024, p)) and math.isclose(sd, binom.std(1024, p))


def test_monte_carlo_close():
    for N, k in [(40, 3), (32, 4), (10, 10)]:
        mean, sd = intersection_baseline(N, k, 4000)
        hits = simulate_intersections(N, k, 4000, seed=1)
        assert abs(hits - mean) <= 3 * max(sd, 1e-9)


def test_rank_scores_ties_by_id():
    r = rank_scores([3, 1, 2, 0], [0.5, 0.5, 0.1, 0.9], True, "visual")
    assert r.source_ids.tolist() == [2, 1, 3, 0] and r.tied
    d = rank_scores([3, 1, 2, 0], [0.5, 0.5, 0.1, 0.9], False, "counterfactual")
    assert d.source_ids.tolist() == [0, 1, 3, 2]
    assert d.position(3) == 2
    with pytest.raises(UnknownSource):
        d.position(9)


def test_ranking_validation():
    with pytest.raises(ConfigError):
        AttributionRanking(np.arange(2), np.zeros(2), True, "psychic")
    with pytest.raises(DataError):
        AttributionRanking(np.array([1, 1]), np.zeros(2), True, "visual")


def _toy_data():
    imgs = np.zeros((5, 1, 2, 2), np.float32)
    imgs[1] = 1.0
    imgs[2] = 0.2
    imgs[3] = 0.5
    imgs[4] = 0.25
    return Dataset(imgs, np.array([0, 1, 1, 2, 2]))


def test_visual_attribution_uses_nearest_image():
    d = _toy_data()
    sample = np.full((1, 2, 2), 0.75)
    r = visual_attribution(sample, d)
    # nearest per source: 0 -> 0.0, 1 -> 1.0, 2 -> 0.5; sources 1 and 2 tie
    assert r.source_ids.tolist() == [1, 2, 0]
    assert r.scores.tolist() == [0.5, 0.5, 1.5] and r.tied
    table = np.sqrt(((d.images.astype(np.float64) - sample) ** 2).reshape(5, -1).sum(axis=1))
    again = visual_attribution_from_table(table, d.sources)
    assert again.source_ids.tolist() == r.source_ids.tolist()
    assert visual_similarity_rank(d, sample, 0) == 1.0
    assert visual_similarity_rank(d, sample, 1) == 0.25  # tied with source 2


def test_topk_and_stat():
    a = rank_scores([0, 1, 2, 3], [1, 2, 3, 4], True, "visual")
    b = rank_scores([0, 1, 2, 3], [1, 2, 3, 4], False, "counterfactual")
    assert not topk_intersection(a, b, 1)
    assert topk_intersection(a, b, 3)
    with pytest.raises(ConfigError):
        topk_intersection(a, b, 5)
    st_ = intersection_stat([a, a], [b, b], 2)
    assert st_.hits == 0 and st_.trials == 2
    assert st_.z < 0
    with pytest.raises(DataError):
        IntersectionStat(1, 2, 3, 0.0, 1.0)


def test_counterfactual_ranking(tiny_ensemble):
    from abckit.diffusion import draw_exogenous
    from abckit.landscape import enumerate_landscape
    e = tiny_ensemble
    l = enumerate_landscape(e, draw_exogenous(1, e.schedule, shape=e.image_shape))
    r = counterfactual_attribution(l)
    assert r.method == "counterfactual"
    assert np.all(np.diff(r.scores) <= 0)
    assert r.top(1)[0] == int(np.argmax(l.distances))


def test_flip_agnostic():
    a = np.arange(6.0).reshape(2, 3)
    assert flip_agnostic_euclidean(a, a[:, ::-1]) == 0
    with pytest.raises(ConfigError):
        flip_agnostic_euclidean(a, a.T)


def test_writers(tmp_path):
    r = rank_scores([0, 1], [0.25, 0.5], True, "visual")
    p = tmp_path / "a.csv"
    write_attribution_csv(p, {0: [r]})
    rows = list(csv.DictReader(open(p)))
    assert rows[0] == {"sample_id": "0", "method": "visual", "rank": "0", "source_id": "0", "score": "0.25"}
    j = tmp_path / "s.json"
    write_summary_json(j, {"N32": IntersectionStat(4, 64, 40, 27.5, 4.0)}, {"x": 1})
    doc = json.load(open(j))
    assert doc["intersections"]["N32"]["z"] == 3.125 and doc["x"] == 1
