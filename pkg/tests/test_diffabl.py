import numpy as np
import pytest

from abckit._util import counting
from abckit.diffabl import (SampleJacobian, approx_counterfactual, approx_landscape, fidelity_report, jacobian,
                            jacobian_bytes, parse_jacobian)
from abckit.diffusion import draw_exogenous, make_schedule, sample
from abckit.ensemble import EnsembleModel, ensemble_predictor, mask_to_coefficients
from abckit.errors import BadMagic, ChecksumMismatch, ConfigError, TruncatedFile
from abckit.landscape import enumerate_landscape, generate_factual


def _sample_at(e, c, noise):
    return sample(ensemble_predictor(e, np.asarray(c, dtype=np.float64)[None]), e.schedule, noise, batch=1)[0]


@pytest.fixture(scope="module")
def noise(tiny_ensemble):
    return draw_exogenous(21, tiny_ensemble.schedule, "deterministic", tiny_ensemble.image_shape)


@pytest.fixture(scope="module")
def jac(tiny_ensemble, noise):
    return jacobian(tiny_ensemble, noise, threads=1)


def test_columns_match_central_differences(tiny_ensemble, noise, jac):
    e = tiny_ensemble
    h = 1e-3
    for j in range(e.n):
        step = np.zeros(e.n)
        step[j] = h
        fd = (_sample_at(e, 1 + step, noise) - _sample_at(e, 1 - step, noise)).ravel() / (2 * h)
        err = np.linalg.norm(jac.J[:, j] - fd) / np.linalg.norm(fd)
        assert err < 1e-3


def test_base_point_is_factual(tiny_ensemble, noise, jac):
    assert jac.y.tobytes() == generate_factual(tiny_ensemble, noise).tobytes()
    assert jac.J.shape == (64, 4)


def test_thread_count_irrelevant(tiny_ensemble, noise, jac):
    assert jacobian(tiny_ensemble, noise, threads=4).J.tobytes() == jac.J.tobytes()


def test_ancestral_columns(tiny_ensemble):
    e = tiny_ensemble
    n = draw_exogenous(5, e.schedule, "ancestral", e.image_shape)
    J = jacobian(e, n, threads=1)
    h = 1e-3
    step = np.zeros(e.n)
    step[2] = h
    fd = (_sample_at(e, 1 + step, n) - _sample_at(e, 1 - step, n)).ravel() / (2 * h)
    assert np.linalg.norm(J.J[:, 2] - fd) / np.linalg.norm(fd) < 1e-3


def test_single_step_is_affine(tiny_ensemble):
    e = tiny_ensemble
    one = EnsembleModel(e.members, make_schedule(50, 1), e.codebook)
    n = draw_exogenous(2, one.schedule, "deterministic", e.image_shape)
    j = jacobian(one, n, threads=1)
    for s in range(e.codebook.N):
        c = mask_to_coefficients(e.codebook.words[s] == 0)
        np.testing.assert_allclose(approx_counterfactual(j, c), _sample_at(one, c, n), atol=1e-8, rtol=0)


def test_identical_members_give_zero_displacement(tiny_ensemble, noise):
    e = tiny_ensemble
    same = EnsembleModel((e.members[0],) * 4, e.schedule, e.codebook)
    j = jacobian(same, noise, threads=1)
    assert np.all(j.J == j.J[:, :1])
    a = approx_landscape(j, e.codebook)
    assert np.all(a.distances == 0)


def test_approx_landscape_and_costs(tiny_ensemble, noise, jac):
    e = tiny_ensemble
    with counting() as c:
        a = approx_landscape(jac, e.codebook, keep_images=True)
    assert c.matvecs == e.codebook.N and c.denoiser_calls == 0
    assert a.approximate
    for s in range(e.codebook.N):
        cf = approx_counterfactual(jac, mask_to_coefficients(e.codebook.words[s] == 0))
        assert np.allclose(cf, a.counterfactuals[s], rtol=0, atol=1e-12)
    exact = enumerate_landscape(e, noise, keep_images=True, threads=1)
    fr = fidelity_report(exact, a)
    assert -1 <= fr.spearman <= 1
    assert fr.per_pixel_pearson.shape == (e.codebook.N,)


def test_tangent_cost(tiny_ensemble, noise):
    e = tiny_ensemble
    K = len(e.schedule.ladder)
    with counting() as c:
        jacobian(e, noise, threads=1)
    assert c.calls == e.n * K
    assert c.tangent_calls == e.n * e.n * K


def test_abcj_round_trip(jac):
    raw = jacobian_bytes(jac)
    back = parse_jacobian(raw)
    assert back.eps_seed == 21 and back.mode == "deterministic"
    assert back.J.tobytes() == jac.J.astype(np.float32).astype(np.float64).tobytes()
    assert back.y.shape == (1, 8, 8)
    with pytest.raises(BadMagic):
        parse_jacobian(b"ABCK" + raw[4:])
    with pytest.raises(TruncatedFile):
        parse_jacobian(raw[:-1])
    bad = bytearray(raw)
    bad[30] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        parse_jacobian(bytes(bad))


def test_shape_checks(jac):
    with pytest.raises(ConfigError):
        SampleJacobian(np.zeros((5, 2)), np.zeros(4), 0)
    with pytest.raises(ConfigError):
        approx_counterfactual(jac, np.ones(3))
