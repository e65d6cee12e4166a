import math

import numpy as np
import pytest

from aiohmm.errors import InvalidArgumentError, NumericalError
from aiohmm.inference import (anticipate_posteriors, batch_loglik, brute_force_loglik, class_logliks,
                              forward_backward, posteriors_from_logliks, sequence_loglik)
from aiohmm.model import (CLASSES, FeatureSequence, ManeuverClass, ManeuverModelSet, ModelParams, StateParams,
                          emission_logpdf, random_params)

from conftest import random_instance, random_sequence
from oracles import dense_gaussian_logpdf, enumerate_loglik, enumerate_posteriors

LOG_2PI = math.log(2 * math.pi)


def _single_state(mu, sigma=None):
    st = StateParams(mu=mu, a=np.zeros(6), b=np.zeros(9), sigma=np.eye(9) if sigma is None else sigma,
                     w_rows=np.zeros((1, 7)))
    return ModelParams(states=(st,), w0=np.zeros((1, 7)))


def test_single_state_gamma_and_loglik(rng):
    p = random_params(1, rng)
    seq = random_sequence(rng, 5)
    fb = forward_backward(p, seq)
    np.testing.assert_array_equal(fb.gamma, 1.0)
    expected = sum(emission_logpdf(p.states[0], seq.z[t], seq.x[t], seq.z_prev[t]) for t in range(5))
    assert fb.loglik == pytest.approx(expected, rel=1e-12)
    assert fb.xi.shape == (4, 1, 1)


def test_k1_base_case(rng):
    p, seq = random_instance(3, S=3, K=1)
    fb = forward_backward(p, seq)
    assert fb.xi.shape == (0, 3, 3)
    # gamma_1 is the initial row reweighted by the emissions
    w = np.exp(p.w0 @ np.concatenate([[1.0], seq.x[0]]))
    w /= w.sum()
    e = np.array([math.exp(dense_gaussian_logpdf(seq.z[0], st.mu * (1 + st.a @ seq.x[0]), st.sigma))
                  for st in p.states])
    np.testing.assert_allclose(fb.gamma[0], w * e / (w * e).sum(), rtol=1e-9)


def test_three_states_six_chunks_against_enumeration():
    p, seq = random_instance(11, S=3, K=6)
    ref = enumerate_loglik(p, seq.x, seq.z)
    fb = forward_backward(p, seq)
    assert abs(fb.loglik - ref) / abs(ref) < 1e-9
    assert abs(brute_force_loglik(p, seq) - ref) / abs(ref) < 1e-12
    g, xi = enumerate_posteriors(p, seq.x, seq.z)
    np.testing.assert_allclose(fb.gamma, g, atol=1e-9)
    np.testing.assert_allclose(fb.xi, xi, atol=1e-9)


def test_sequence_loglik_agrees_with_forward_backward():
    for seed in range(100):
        p, seq = random_instance(seed)
        assert abs(sequence_loglik(p, seq) - forward_backward(p, seq).loglik) <= 1e-12 * max(1.0, abs(
            sequence_loglik(p, seq)))


def test_sequence_loglik_three_means():
    mu = np.arange(9.0) / 10
    p = _single_state(mu)
    seq = FeatureSequence(x=np.zeros((3, 6)), z=np.tile(mu, (3, 1)))
    assert sequence_loglik(p, seq) == pytest.approx(3 * -4.5 * LOG_2PI, abs=1e-12)


def test_two_states_five_chunks_against_enumeration():
    p, seq = random_instance(21, S=2, K=5)
    ref = enumerate_loglik(p, seq.x, seq.z)
    assert abs(sequence_loglik(p, seq) - ref) / abs(ref) < 1e-9


def test_log_scale_factors_sum_to_loglik(rng):
    p, seq = random_instance(5, S=3, K=6)
    fb = forward_backward(p, seq)
    assert fb.log_scale_factors.shape == (6,)
    assert math.fsum(fb.log_scale_factors) == pytest.approx(fb.loglik, rel=1e-13)


def test_batch_matches_single(rng):
    p = random_params(3, rng)
    seqs = [random_sequence(rng, int(k)) for k in rng.integers(1, 8, size=15)]
    np.testing.assert_allclose(batch_loglik(p, seqs), [sequence_loglik(p, s) for s in seqs], rtol=1e-12)


def test_brute_force_single_state_exact(rng):
    p = random_params(1, rng)
    seq = random_sequence(rng, 4)
    assert brute_force_loglik(p, seq) == pytest.approx(sequence_loglik(p, seq), rel=1e-14)


def test_brute_force_four_paths_by_hand():
    p, seq = random_instance(3, S=2, K=2)
    aug = [np.concatenate([[1.0], x]) for x in seq.x]

    def sm(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    pi = sm(p.w0 @ aug[0])
    A = np.stack([sm(st.w_rows @ aug[1]) for st in p.states])
    e = np.zeros((2, 2))
    for t in range(2):
        zp = seq.z[0] if t else np.zeros(9)
        for j, st in enumerate(p.states):
            e[t, j] = math.exp(dense_gaussian_logpdf(seq.z[t], (1 + st.a @ seq.x[t] + st.b @ zp) * st.mu, st.sigma))
    total = (pi[0] * e[0, 0] * A[0, 0] * e[1, 0] + pi[0] * e[0, 0] * A[0, 1] * e[1, 1]
             + pi[1] * e[0, 1] * A[1, 0] * e[1, 0] + pi[1] * e[0, 1] * A[1, 1] * e[1, 1])
    assert brute_force_loglik(p, seq) == pytest.approx(math.log(total), rel=1e-12)


def test_brute_force_guard(rng):
    p = random_params(4, rng)
    with pytest.raises(InvalidArgumentError):
        brute_force_loglik(p, random_sequence(rng, 12))


def test_underflow_reports_chunk():
    # state 0 is certain at the start and can never leave; chunk 2 is only
    # explainable by state 1, so the forward row becomes exactly zero
    w = np.zeros((2, 7))
    w[0, 0] = 2000.0
    far = np.zeros(9)
    far[0] = 100.0
    s0 = StateParams(mu=np.zeros(9), a=np.zeros(6), b=np.zeros(9), sigma=np.eye(9), w_rows=w)
    s1 = StateParams(mu=far, a=np.zeros(6), b=np.zeros(9), sigma=np.eye(9), w_rows=w)
    p = ModelParams(states=(s0, s1), w0=w)
    z = np.zeros((3, 9))
    z[2] = far
    with pytest.raises(NumericalError, match="chunk 2"):
        forward_backward(p, FeatureSequence(x=np.zeros((3, 6)), z=z))


# -- class posteriors ------------------------------------------------------------

def _model_set(models, prior=None):
    kw = {} if prior is None else {"prior": prior}
    return ManeuverModelSet(dict(zip(CLASSES, models)), **kw)


def test_identical_models_uniform(rng):
    p = random_params(2, rng)
    post = anticipate_posteriors(_model_set([p] * 5), random_sequence(rng, 6))
    np.testing.assert_allclose(post, 0.2, atol=1e-15)


def test_one_hot_prior(rng):
    models = [random_params(2, rng) for _ in range(5)]
    prior = np.zeros(5)
    prior[ManeuverClass.LEFT_TURN.index] = 1.0
    post = anticipate_posteriors(_model_set(models, prior), random_sequence(rng, 6))
    np.testing.assert_array_equal(post, prior)


def test_two_distinct_single_state_models():
    # class 0 centered on the data, class 1 shifted by e1; others far away
    z = np.zeros((2, 9))
    far = _single_state(np.full(9, 50.0))
    e1 = np.zeros(9)
    e1[0] = 1.0
    models = [_single_state(np.zeros(9)), _single_state(e1), far, far, far]
    seq = FeatureSequence(x=np.zeros((2, 6)), z=z)
    L1 = 2 * (-4.5 * LOG_2PI)
    L2 = L1 - 2 * 0.5
    post = anticipate_posteriors(_model_set(models), seq)
    expected = np.exp([L1, L2]) / np.exp([L1, L2]).sum()
    np.testing.assert_allclose(post[:2], expected, rtol=1e-12)
    np.testing.assert_allclose(class_logliks(_model_set(models), seq)[:2], [L1, L2], rtol=1e-12)


def test_invalid_model_rejected(rng):
    good = random_params(1, rng)
    bad_sigma = np.eye(9)
    bad_sigma[0, 0] = -1
    bad = good.replace(states=(good.states[0].replace(sigma=bad_sigma),))
    with pytest.raises(InvalidArgumentError):
        anticipate_posteriors(_model_set([good, good, bad, good, good]), random_sequence(rng, 3))


def test_prior_scale_invariance(rng):
    L = rng.normal(-50, 10, size=5)
    prior = rng.uniform(0.1, 1, size=5)
    np.testing.assert_allclose(posteriors_from_logliks(L, prior), posteriors_from_logliks(L, 7.5 * prior),
                               atol=1e-12)
    assert posteriors_from_logliks(L, prior).sum() == pytest.approx(1.0, abs=1e-12)
