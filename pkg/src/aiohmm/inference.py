"""Forward-backward posteriors, sequence likelihoods and maneuver posteriors.

The recursions are scaled: each forward row is normalized and the log of
the normalizer is accumulated.  Emission densities are shifted by their
per-chunk maximum before exponentiation so that peaked Gaussians cannot
underflow the whole row; the shift is added back into the log-likelihood.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError, NumericalError
from .model import (
    CLASSES, FeatureSequence, ManeuverModelSet, ModelParams, emission_logpdf,
    initial_row, log_emission_tensor, log_initial_matrix, log_transition_tensor,
    stack_sequences, transition_row, validate,
)

BRUTE_FORCE_MAX_PATHS = 10**6


@dataclass(frozen=True, eq=False)
class PosteriorStats:
    """Forward-backward output for one sequence.

    gamma : (K, S) array, ``P(Y_t = j | z, x)``.
    xi : (K-1, S, S) array, ``P(Y_{t-1} = i, Y_t = j | z, x)`` for t = 2..K.
    loglik : ``log P(z | x)``.
    log_scale_factors : (K,) array whose sum is ``loglik``.
    """

    gamma: np.ndarray
    xi: np.ndarray
    loglik: float
    log_scale_factors: np.ndarray


def _forward_backward_batch(params: ModelParams, X, Z, Zp, want_posteriors=True):
    """Scaled forward-backward over N equal-length sequences at once."""
    N, K, _ = X.shape
    log_e = log_emission_tensor(params, X, Z, Zp)
    shift = log_e.max(axis=2, keepdims=True)
    e = np.exp(log_e - shift)
    trans = np.exp(log_transition_tensor(params, X))
    init = np.exp(log_initial_matrix(params, X))

    S = params.n_states
    alpha = np.empty((N, K, S))
    log_c = np.empty((N, K))
    a = init * e[:, 0]
    for t in range(K):
        if t > 0:
            a = np.einsum("ni,nij->nj", alpha[:, t - 1], trans[:, t]) * e[:, t]
        c = a.sum(axis=1)
        bad = ~(c > 0) | ~np.isfinite(c)
        if bad.any():
            n = int(np.flatnonzero(bad)[0])
            raise NumericalError(
                f"forward recursion underflowed at chunk {t} (sequence {n} of batch)")
        alpha[:, t] = a / c[:, None]
        log_c[:, t] = np.log(c)
    log_scale = log_c + shift[:, :, 0]
    loglik = log_scale.sum(axis=1)
    if not want_posteriors:
        return loglik, None, None, log_scale

    beta = np.empty((N, K, S))
    beta[:, K - 1] = 1.0
    for t in range(K - 1, 0, -1):
        beta[:, t - 1] = np.einsum("nij,nj->ni", trans[:, t], e[:, t] * beta[:, t]) / np.exp(log_c[:, t])[:, None]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    if K > 1:
        xi = (alpha[:, :-1, :, None] * trans[:, 1:]
              * (e[:, 1:] * beta[:, 1:])[:, :, None, :]
              / np.exp(log_c[:, 1:])[:, :, None, None])
        xi /= xi.sum(axis=(2, 3), keepdims=True)
    else:
        xi = np.zeros((N, 0, S, S))
    return loglik, gamma, xi, log_scale


def _by_length(seqs):
    groups = {}
    for n, s in enumerate(seqs):
        groups.setdefault(len(s), []).append(n)
    return groups


def batch_forward_backward(params: ModelParams, seqs: Sequence[FeatureSequence]) -> list[PosteriorStats]:
    """:func:`forward_backward` for many sequences, vectorized by length."""
    out = [None] * len(seqs)
    for _, idx in _by_length(seqs).items():
        X, Z, Zp = stack_sequences([seqs[n] for n in idx])
        try:
            ll, gamma, xi, log_scale = _forward_backward_batch(params, X, Z, Zp)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (dataset indices {idx[:5]}...)") from exc
        for k, n in enumerate(idx):
            out[n] = PosteriorStats(gamma[k], xi[k], float(ll[k]), log_scale[k])
    return out


def batch_loglik(params: ModelParams, seqs: Sequence[FeatureSequence]) -> np.ndarray:
    """Vector of ``sequence_loglik`` values."""
    out = np.empty(len(seqs))
    for _, idx in _by_length(seqs).items():
        X, Z, Zp = stack_sequences([seqs[n] for n in idx])
        out[idx] = _forward_backward_batch(params, X, Z, Zp, want_posteriors=False)[0]
    return out


def forward_backward(params: ModelParams, seq: FeatureSequence) -> PosteriorStats:
    return batch_forward_backward(params, [seq])[0]


def sequence_loglik(params: ModelParams, seq: FeatureSequence) -> float:
    """``log P(z_1..K | x_1..K)`` by a scaled forward pass; O(K S^2)."""
    X, Z, Zp = stack_sequences([seq])
    return float(_forward_backward_batch(params, X, Z, Zp, want_posteriors=False)[0][0])


def brute_force_loglik(params: ModelParams, seq: FeatureSequence) -> float:
    """Log of the explicit sum over every latent path.

    Exponential in K; intended as a test oracle.  Built only from the scalar
    per-step functions so it shares no code with the forward recursion.
    """
    S, K = params.n_states, len(seq)
    if S ** K > BRUTE_FORCE_MAX_PATHS:
        raise InvalidArgumentError(f"{S}^{K} paths exceed the enumeration limit of {BRUTE_FORCE_MAX_PATHS}")
    x, z, zp = seq.x, seq.z, seq.z_prev
    log_em = np.array([[emission_logpdf(params.states[j], z[t], x[t], zp[t]) for j in range(S)]
                       for t in range(K)])
    log_init = np.log(initial_row(params, x[0]))
    log_tr = [None] + [np.log(np.array([transition_row(params.states[i], x[t]) for i in range(S)]))
                       for t in range(1, K)]
    terms = []
    for path in itertools.product(range(S), repeat=K):
        total = log_init[path[0]] + log_em[0, path[0]]
        for t in range(1, K):
            total += log_tr[t][path[t - 1], path[t]] + log_em[t, path[t]]
        terms.append(total)
    return float(logsumexp(terms))


def class_logliks(models: ManeuverModelSet, seq: FeatureSequence) -> np.ndarray:
    """``log P(z | x, M)`` for every class, in :data:`CLASSES` order."""
    return np.array([sequence_loglik(models[c], seq) for c in CLASSES])


def posteriors_from_logliks(logliks, prior) -> np.ndarray:
    """Normalize ``exp(loglik) * prior`` over classes in log space."""
    prior = np.asarray(prior, dtype=float)
    with np.errstate(divide="ignore"):
        scores = np.asarray(logliks, dtype=float) + np.log(prior / prior.sum())
    return np.exp(scores - logsumexp(scores, axis=-1, keepdims=True))


def anticipate_posteriors(models: ManeuverModelSet, seq: FeatureSequence) -> np.ndarray:
    """P(M | z, x) for the five classes, proportional to P(z | x, M) P(M)."""
    for c in CLASSES:
        problems = validate(models[c])
        if problems:
            raise InvalidArgumentError(f"model for {c.value} is invalid: {problems[0]}")
    return posteriors_from_logliks(class_logliks(models, seq), models.prior)
