"""EM training of per-maneuver AIO-HMMs.

The M-step is a single block-coordinate sweep: mu, sigma, a and b each have
a closed-form maximizer of Q given the other blocks, and the softmax
transition weights take a few steps of regularized gradient ascent.  Every
block is accepted only if it does not lower its part of Q, which makes the
sweep a generalized EM step even when a ridge or a step-size heuristic is
involved.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import log_softmax, softmax

from .errors import InternalError, InvalidArgumentError, NumericalError
from .inference import PosteriorStats, batch_forward_backward
from .model import (
    CLASSES, LOG_2PI, FeatureSequence, ManeuverClass, ManeuverModelSet,
    ModelParams, StateParams, augment, log_emission_tensor, log_initial_matrix,
    log_transition_tensor, stack_sequences,
)

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-8
FROZEN_MASS = 1e-12
NORMAL_EQ_RIDGE = 1e-8


class Ablation(str, enum.Enum):
    AIO_HMM = "aio_hmm"
    IO_HMM = "io_hmm"          # no autoregression: b = 0
    HMM_OUTPUT = "hmm_output"  # no inputs at all: a = b = 0, bias-only transitions


@dataclass(frozen=True)
class EmConfig:
    n_states: int = 3
    max_iters: int = 100
    loglik_rel_tol: float = 1e-6
    sigma_ridge: float = 1e-6
    w_step_size: float = 0.1
    w_grad_iters: int = 25
    w_l2: float = 1e-3
    ablation: Ablation = Ablation.AIO_HMM
    seed: int = 0
    diagonal_sigma: bool = False
    # trace/dim used to scale the ridge; None means "of the dataset being fit"
    ridge_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        if self.n_states < 1 or self.max_iters < 1 or self.w_grad_iters < 1:
            raise InvalidArgumentError("n_states, max_iters and w_grad_iters must be >= 1")
        for name in ("loglik_rel_tol", "sigma_ridge", "w_step_size", "w_l2"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be strictly positive")
        if self.ridge_scale is not None and not self.ridge_scale > 0:
            raise InvalidArgumentError("ridge_scale must be positive when given")


@dataclass
class FitReport:
    params: ModelParams
    loglik_trace: list = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    warnings: list = field(default_factory=list)


class _Pool:
    """All chunks of a dataset flattened into (M, dim) arrays."""

    def __init__(self, dataset: Sequence[FeatureSequence]):
        if not dataset:
            raise InvalidArgumentError("dataset is empty")
        dims = {(s.x.shape[1], s.z.shape[1]) for s in dataset}
        if len(dims) != 1:
            raise InvalidArgumentError(f"sequences disagree on dimensions: {sorted(dims)}")
        self.X = np.concatenate([s.x for s in dataset])
        self.Z = np.concatenate([s.z for s in dataset])
        self.Zp = np.concatenate([s.z_prev for s in dataset])
        self.X_trans = augment(np.concatenate([s.x[1:] for s in dataset]))
        self.X_init = augment(np.stack([s.x[0] for s in dataset]))
        self.dim_z = self.Z.shape[1]

    def attach(self, stats: Sequence[PosteriorStats]):
        self.gamma = np.concatenate([p.gamma for p in stats])
        self.xi = np.concatenate([p.xi for p in stats])
        self.gamma_init = np.stack([p.gamma[0] for p in stats])
        return self


def ridge_scale(dataset_or_pool) -> float:
    """``trace(cov(z)) / dim`` over every chunk, 1 for degenerate data."""
    pool = dataset_or_pool if isinstance(dataset_or_pool, _Pool) else _Pool(dataset_or_pool)
    Z = pool.Z
    scale = np.trace(np.atleast_2d(np.cov(Z.T, bias=True))) / pool.dim_z if len(Z) > 1 else 0.0
    return float(scale) if scale > 0 else 1.0


def sigma_ridge(dataset_or_pool, cfg: EmConfig) -> float:
    """Ridge added to every covariance: ``cfg.sigma_ridge * trace(cov(z)) / dim``."""
    scale = cfg.ridge_scale if cfg.ridge_scale is not None else ridge_scale(dataset_or_pool)
    return cfg.sigma_ridge * scale


def _constrain(params: ModelParams, ablation: Ablation) -> ModelParams:
    if ablation is Ablation.AIO_HMM:
        return params
    states = []
    for s in params.states:
        kw = {"b": np.zeros_like(s.b)}
        if ablation is Ablation.HMM_OUTPUT:
            w = np.array(s.w_rows)
            w[:, 1:] = 0.0
            kw.update(a=np.zeros_like(s.a), w_rows=w)
        states.append(s.replace(**kw))
    w0 = np.array(params.w0)
    if ablation is Ablation.HMM_OUTPUT:
        w0[:, 1:] = 0.0
    return ModelParams(states=tuple(states), w0=w0)


def init_params(dataset: Sequence[FeatureSequence], cfg: EmConfig) -> ModelParams:
    """k-means initialization of the state means and covariances.

    a, b and all transition weights start at zero.
    """
    pool = _Pool(dataset)
    Z, S = pool.Z, cfg.n_states
    if np.unique(Z, axis=0).shape[0] < S:
        raise InvalidArgumentError(f"fewer distinct output vectors than the {S} requested states")
    ridge = sigma_ridge(pool, cfg)
    global_cov = np.atleast_2d(np.cov(Z.T, bias=True)) if len(Z) > 1 else np.zeros((pool.dim_z,) * 2)
    if S == 1:
        labels = np.zeros(len(Z), dtype=int)
    else:
        rng = np.random.default_rng(cfg.seed)
        _, labels = kmeans2(Z, S, minit="++", seed=rng, missing="warn")
        labels = _fill_empty_clusters(Z, labels, S)
    dx, dz = pool.X.shape[1], pool.dim_z
    states = []
    for i in range(S):
        members = Z[labels == i]
        mu = members.mean(axis=0)
        cov = np.cov(members.T, bias=True) if len(members) > 1 else global_cov
        if cfg.diagonal_sigma:
            cov = np.diag(np.diag(cov))
        states.append(StateParams(mu=mu, a=np.zeros(dx), b=np.zeros(dz),
                                  sigma=cov + ridge * np.eye(dz), w_rows=np.zeros((S, dx + 1))))
    return ModelParams(states=tuple(states), w0=np.zeros((S, dx + 1)))


def _fill_empty_clusters(Z, labels, S):
    labels = labels.copy()
    for i in range(S):
        if np.any(labels == i):
            continue
        centers = np.stack([Z[labels == k].mean(axis=0) if np.any(labels == k) else np.full(Z.shape[1], np.nan)
                            for k in range(S)])
        dist = np.nanmin(((Z[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        counts = np.bincount(labels, minlength=S)
        dist[counts[labels] <= 1] = -1.0
        labels[int(np.argmax(dist))] = i
    return labels


def e_step(params: ModelParams, dataset: Sequence[FeatureSequence]):
    """Posteriors for every sequence and the total log-likelihood."""
    try:
        stats = batch_forward_backward(params, dataset)
    except NumericalError as exc:
        raise NumericalError(f"e-step failed: {exc}") from exc
    total = math.fsum(p.loglik for p in stats)
    return stats, total


def q_value(params: ModelParams, stats: Sequence[PosteriorStats], dataset: Sequence[FeatureSequence]) -> float:
    """Expected complete-data log-likelihood under the given posteriors."""
    total = 0.0
    groups = {}
    for n, s in enumerate(dataset):
        groups.setdefault(len(s), []).append(n)
    for _, idx in groups.items():
        X, Z, Zp = stack_sequences([dataset[n] for n in idx])
        gamma = np.stack([stats[n].gamma for n in idx])
        xi = np.stack([stats[n].xi for n in idx])
        total += float(np.sum(gamma * log_emission_tensor(params, X, Z, Zp)))
        if X.shape[1] > 1:
            total += float(np.sum(xi * log_transition_tensor(params, X)[:, 1:]))
        total += float(np.sum(gamma[:, 0] * log_initial_matrix(params, X)))
    return total


# ---------------------------------------------------------------------------
# emission blocks


def _modulation(pool, a, b):
    return 1.0 + pool.X @ a + pool.Zp @ b


def emission_q(pool: _Pool, g, mu, sigma, a, b) -> float:
    """gamma-weighted Gaussian log-density of one state, summed over chunks."""
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return -np.inf
    R = pool.Z - _modulation(pool, a, b)[:, None] * mu
    y = np.linalg.solve(L, R.T)
    maha = np.einsum("ij,ij->j", y, y)
    log_det = 2.0 * np.log(np.diag(L)).sum()
    return float(-0.5 * g @ (pool.dim_z * LOG_2PI + log_det + maha))


def update_mu(pool: _Pool, g, a, b):
    """mu = sum c g z / sum c^2 g with c from the current a, b."""
    c = _modulation(pool, a, b)
    den = g @ (c * c)
    if not den > FROZEN_MASS:
        return None
    return (g * c) @ pool.Z / den


def update_sigma(pool: _Pool, g, mu, a, b, ridge: float, diagonal: bool = False):
    c = _modulation(pool, a, b)
    R = pool.Z - c[:, None] * mu
    cov = (g[:, None] * R).T @ R / g.sum()
    cov = 0.5 * (cov + cov.T)
    if diagonal:
        cov = np.diag(np.diag(cov))
    return cov + ridge * np.eye(pool.dim_z)


def _target(pool, mu, sigma):
    """u_t = z_t' S^-1 mu / mu' S^-1 mu, the least-squares value of c_t."""
    v = np.linalg.solve(sigma, mu)
    s = mu @ v
    if not s > 0:
        return None
    return pool.Z @ v / s


def _solve_normal(A, rhs, what, warnings):
    scale = max(1.0, np.trace(A) / len(A))
    if np.linalg.cond(A) < 1e12:
        return np.linalg.solve(A, rhs)
    warnings.append(f"{what}: singular normal equations, ridge-augmented")
    A2 = A + NORMAL_EQ_RIDGE * scale * np.eye(len(A))
    if not np.linalg.cond(A2) < 1e15:
        raise NumericalError(f"{what}: normal equations singular even after ridge augmentation")
    return np.linalg.solve(A2, rhs)


def update_a(pool: _Pool, g, mu, sigma, b, warnings=None, what="a"):
    """Closed-form a given mu, sigma and b (weighted least squares on c)."""
    u = _target(pool, mu, sigma)
    if u is None:
        return None
    X = pool.X
    A = (g[:, None] * X).T @ X
    rhs = (g[:, None] * X).T @ (u - 1.0 - pool.Zp @ b)
    return _solve_normal(A, rhs, what, warnings if warnings is not None else [])


def update_b(pool: _Pool, g, mu, sigma, a, warnings=None, what="b"):
    """Closed-form b given mu, sigma and a."""
    u = _target(pool, mu, sigma)
    if u is None:
        return None
    Zp = pool.Zp
    A = (g[:, None] * Zp).T @ Zp
    rhs = (g[:, None] * Zp).T @ (u - 1.0 - pool.X @ a)
    return _solve_normal(A, rhs, what, warnings if warnings is not None else [])


# ---------------------------------------------------------------------------
# transition weights


def softmax_objective(W, X_aug, weights, l2: float = 0.0) -> float:
    """sum_t sum_j weights[t, j] log softmax(W x_t)_j, per unit weight, minus l2/2 |W|^2."""
    n = weights.sum()
    ll = np.sum(weights * log_softmax(X_aug @ W.T, axis=1)) / n
    return float(ll - 0.5 * l2 * np.sum(W * W))


def softmax_objective_grad(W, X_aug, weights, l2: float = 0.0) -> np.ndarray:
    n = weights.sum()
    p = softmax(X_aug @ W.T, axis=1)
    resid = weights - weights.sum(axis=1, keepdims=True) * p
    return resid.T @ X_aug / n - l2 * W


def update_weights(W, X_aug, weights, cfg: EmConfig, bias_only: bool = False):
    """Regularized, diagonally preconditioned gradient ascent with backtracking.

    Returns the new weight matrix; never lowers the unregularized objective.
    """
    W = np.array(W, dtype=float)
    if weights.sum() < FROZEN_MASS or len(X_aug) == 0:
        return W
    mass = weights.sum(axis=1)
    precond = 1.0 / ((mass @ X_aug ** 2) / mass.sum() + 1e-12)
    mask = np.ones(X_aug.shape[1])
    if bias_only:
        mask[1:] = 0.0
    obj = lambda M: softmax_objective(M, X_aug, weights, cfg.w_l2)
    W0 = W.copy()
    current = obj(W)
    step = cfg.w_step_size
    for _ in range(cfg.w_grad_iters):
        direction = softmax_objective_grad(W, X_aug, weights, cfg.w_l2) * precond * mask
        for _ in range(11):
            trial = W + step * direction
            val = obj(trial)
            if val >= current:
                break
            step *= 0.5
        else:
            break
        W, current = trial, val
    if softmax_objective(W, X_aug, weights) < softmax_objective(W0, X_aug, weights):
        return W0
    return W


# ---------------------------------------------------------------------------


def m_step(params: ModelParams, stats: Sequence[PosteriorStats], dataset: Sequence[FeatureSequence],
           cfg: EmConfig, warnings: list | None = None) -> ModelParams:
    """One block-coordinate sweep mu -> sigma -> a -> b -> (w, w0)."""
    warnings = warnings if warnings is not None else []
    pool = _Pool(dataset).attach(stats)
    ridge = sigma_ridge(pool, cfg)
    ablation = cfg.ablation
    new_states = []
    for i, st in enumerate(params.states):
        g = pool.gamma[:, i]
        mu, sigma, a, b = st.mu, st.sigma, st.a, st.b
        w_rows = st.w_rows
        if g.sum() < FROZEN_MASS:
            warnings.append(f"state {i}: responsibility mass below {FROZEN_MASS}, frozen this sweep")
            new_states.append(st)
            continue
        q = emission_q(pool, g, mu, sigma, a, b)

        def accept(cand, **blk):
            nonlocal q
            if cand is None or not np.all(np.isfinite(cand)):
                return False
            args = dict(mu=mu, sigma=sigma, a=a, b=b)
            args.update(blk)
            q_new = emission_q(pool, g, **args)
            if q_new >= q:
                q = q_new
                return True
            return False

        cand = update_mu(pool, g, a, b)
        if accept(cand, mu=cand):
            mu = cand
        cand = update_sigma(pool, g, mu, a, b, ridge, cfg.diagonal_sigma)
        if accept(cand, sigma=cand):
            sigma = cand
        if ablation is not Ablation.HMM_OUTPUT:
            cand = update_a(pool, g, mu, sigma, b, warnings, f"state {i} a")
            if accept(cand, a=cand):
                a = cand
        if ablation is Ablation.AIO_HMM:
            cand = update_b(pool, g, mu, sigma, a, warnings, f"state {i} b")
            if accept(cand, b=cand):
                b = cand
        if len(pool.X_trans):
            w_rows = update_weights(w_rows, pool.X_trans, pool.xi[:, i, :], cfg,
                                    bias_only=ablation is Ablation.HMM_OUTPUT)
        new_states.append(StateParams(mu=mu, a=a, b=b, sigma=sigma, w_rows=w_rows))
    w0 = update_weights(params.w0, pool.X_init, pool.gamma_init, cfg,
                        bias_only=ablation is Ablation.HMM_OUTPUT)
    return ModelParams(states=tuple(new_states), w0=w0)


def fit_em(dataset: Sequence[FeatureSequence], cfg: EmConfig, init: ModelParams | None = None) -> FitReport:
    """Alternate E and M steps until the relative gain drops below tolerance."""
    params = _constrain(init if init is not None else init_params(dataset, cfg), cfg.ablation)
    report = FitReport(params=params)
    for it in range(cfg.max_iters):
        stats, ll = e_step(params, dataset)
        if report.loglik_trace and ll < report.loglik_trace[-1] - MONOTONE_SLACK:
            raise InternalError(
                f"EM log-likelihood decreased at iteration {it}: {report.loglik_trace[-1]!r} -> {ll!r}")
        report.loglik_trace.append(ll)
        report.params = params
        report.iterations_run = it + 1
        if len(report.loglik_trace) > 1:
            prev = report.loglik_trace[-2]
            if ll - prev < cfg.loglik_rel_tol * max(abs(prev), 1e-300):
                report.converged = True
                break
        params = m_step(params, stats, dataset, cfg, report.warnings)
    log.debug("EM finished after %d iterations (converged=%s), loglik %.6g",
              report.iterations_run, report.converged, report.loglik_trace[-1])
    return report


def fit_all(datasets: Mapping[ManeuverClass, Sequence[FeatureSequence]], cfg: EmConfig,
            reports: dict | None = None) -> ManeuverModelSet:
    """Train one model per class with a uniform class prior.

    Unless ``cfg.ridge_scale`` is set, the covariance ridge is scaled by the
    pooled data of all classes so every class gets the same ridge.  The
    features satisfy an exact linear constraint, so along one direction each
    covariance is pure ridge, and class-specific ridges would shift class
    log-likelihoods by a constant per chunk.
    """
    datasets = {ManeuverClass(k): v for k, v in datasets.items()}
    for c in CLASSES:
        if not datasets.get(c):
            raise InvalidArgumentError(f"no training sequences for class {c.value}")
    if cfg.ridge_scale is None:
        cfg = replace(cfg, ridge_scale=ridge_scale([s for c in CLASSES for s in datasets[c]]))
    models = {}
    for c in CLASSES:
        seqs = datasets[c]
        report = fit_em(seqs, cfg)
        log.info("%s: %d sequences, %d EM iterations, loglik %.4f",
                 c.value, len(seqs), report.iterations_run, report.loglik_trace[-1])
        if reports is not None:
            reports[c] = report
        models[c] = report.params
    return ManeuverModelSet(models=models)


def group_by_label(dataset: Sequence[FeatureSequence]) -> dict:
    """Split a labeled dataset into per-class lists (every class key present)."""
    out = {c: [] for c in CLASSES}
    for s in dataset:
        if s.label is None:
            raise InvalidArgumentError("unlabeled sequence in a training dataset")
        out[s.label].append(s)
    return out
