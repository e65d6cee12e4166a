"""AIO-HMM data types, parameterization and generative sampling.

A model for one maneuver has a set of latent driver states.  Leaving state
``i`` at chunk ``t`` is a log-linear (softmax) function of the outside
features ``x_t``; the inside features ``z_t`` are Gaussian with a mean
``c_it * mu_i`` where ``c_it = 1 + a_i . x_t + b_i . z_{t-1}``.

All scores use the augmented input ``[1, x]`` so every transition row has a
bias term, and the first chunk uses ``z_0 = 0``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidArgumentError, NumericalError

DIM_X = 6
DIM_Z = 9
LOG_2PI = math.log(2.0 * math.pi)


class ManeuverClass(str, enum.Enum):
    LEFT_LANE_CHANGE = "left_lane_change"
    RIGHT_LANE_CHANGE = "right_lane_change"
    LEFT_TURN = "left_turn"
    RIGHT_TURN = "right_turn"
    DRIVING_STRAIGHT = "driving_straight"

    @property
    def is_maneuver(self) -> bool:
        return self is not ManeuverClass.DRIVING_STRAIGHT

    @property
    def index(self) -> int:
        return CLASSES.index(self)


# Fixed order; also the tie-break order for predictions.
CLASSES: tuple[ManeuverClass, ...] = tuple(ManeuverClass)
MANEUVERS: tuple[ManeuverClass, ...] = CLASSES[:4]
STRAIGHT = ManeuverClass.DRIVING_STRAIGHT


class OutsideFeature(NamedTuple):
    """Outside-vehicle context for one chunk."""

    lane_exists_left: int
    lane_exists_right: int
    road_artifact: int
    speed_avg: float
    speed_max: float
    speed_min: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


def _frozen(arr, shape=None, name="array"):
    out = np.array(arr, dtype=float, copy=True)
    if shape is not None and out.shape != shape:
        raise InvalidArgumentError(f"{name} must have shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


def augment(x) -> np.ndarray:
    """Prepend the bias coordinate: ``x -> [1, x]`` along the last axis."""
    x = np.asarray(x, dtype=float)
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([ones, x], axis=-1)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """Outside inputs ``x`` (K x 6) paired with inside outputs ``z`` (K x 9).

    ``label`` is ``None`` for unlabeled windows fed to anticipation.
    """

    x: np.ndarray
    z: np.ndarray
    label: ManeuverClass | None = None
    chunk_duration_s: float = 0.8

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        z = np.array(self.z, dtype=float)
        if x.ndim != 2 or z.ndim != 2:
            raise InvalidArgumentError("x and z must be 2-d arrays (K x dim)")
        if x.shape[0] != z.shape[0] or x.shape[0] < 1:
            raise InvalidArgumentError(
                f"inputs and outputs must have equal length K >= 1, got {x.shape[0]} and {z.shape[0]}")
        x.flags.writeable = False
        z.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        if self.label is not None:
            object.__setattr__(self, "label", ManeuverClass(self.label))

    def __len__(self):
        return self.x.shape[0]

    @property
    def z_prev(self) -> np.ndarray:
        """Outputs shifted by one chunk, with the zero vector before the first."""
        return np.vstack([np.zeros((1, self.z.shape[1])), self.z[:-1]])


@dataclass(frozen=True, eq=False)
class StateParams:
    """Parameters of one latent state: emission ``mu, a, b, sigma`` and the
    transition weights ``w_rows`` (one row in R^7 per destination state)."""

    mu: np.ndarray
    a: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    w_rows: np.ndarray

    def __post_init__(self):
        mu = _frozen(self.mu, name="mu")
        if mu.ndim != 1:
            raise InvalidArgumentError("mu must be a vector")
        dz = mu.shape[0]
        a = _frozen(self.a, name="a")
        if a.ndim != 1:
            raise InvalidArgumentError("a must be a vector")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", _frozen(self.b, (dz,), "b"))
        object.__setattr__(self, "sigma", _frozen(self.sigma, (dz, dz), "sigma"))
        w = _frozen(self.w_rows, name="w_rows")
        if w.ndim != 2 or w.shape[1] != a.shape[0] + 1:
            raise InvalidArgumentError(f"w_rows must have shape (n_states, {a.shape[0] + 1})")
        object.__setattr__(self, "w_rows", w)

    @property
    def dim_x(self) -> int:
        return self.a.shape[0]

    @property
    def dim_z(self) -> int:
        return self.mu.shape[0]

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of ``sigma``; raises NumericalError if not PD."""
        try:
            return np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("sigma is not positive definite") from exc

    def replace(self, **changes) -> "StateParams":
        kw = dict(mu=self.mu, a=self.a, b=self.b, sigma=self.sigma, w_rows=self.w_rows)
        kw.update(changes)
        return StateParams(**kw)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full AIO-HMM for one maneuver: per-state parameters plus the
    initial-state weights ``w0`` (one row in R^7 per state)."""

    states: tuple[StateParams, ...]
    w0: np.ndarray

    def __post_init__(self):
        states = tuple(self.states)
        if not states:
            raise InvalidArgumentError("a model needs at least one state")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "w0", _frozen(self.w0, name="w0"))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def dim_x(self) -> int:
        return self.states[0].dim_x

    @property
    def dim_z(self) -> int:
        return self.states[0].dim_z

    # Stacked views used by the vectorized inference code.
    @cached_property
    def mus(self) -> np.ndarray:
        return np.stack([s.mu for s in self.states])

    @cached_property
    def a_mat(self) -> np.ndarray:
        return np.stack([s.a for s in self.states])

    @cached_property
    def b_mat(self) -> np.ndarray:
        return np.stack([s.b for s in self.states])

    @cached_property
    def w_tensor(self) -> np.ndarray:
        """Transition weights indexed ``[source, destination, feature]``."""
        return np.stack([s.w_rows for s in self.states])

    @cached_property
    def chol_inv(self) -> np.ndarray:
        return np.stack([np.linalg.inv(s.chol) for s in self.states])

    @cached_property
    def log_dets(self) -> np.ndarray:
        return np.array([2.0 * np.log(np.diag(s.chol)).sum() for s in self.states])

    def replace(self, **changes) -> "ModelParams":
        kw = dict(states=self.states, w0=self.w0)
        kw.update(changes)
        return ModelParams(**kw)

    @classmethod
    def zeros(cls, n_states: int, dim_x: int = DIM_X, dim_z: int = DIM_Z) -> "ModelParams":
        """Unit-covariance, zero-mean model with uniform transitions."""
        state = StateParams(
            mu=np.zeros(dim_z), a=np.zeros(dim_x), b=np.zeros(dim_z),
            sigma=np.eye(dim_z), w_rows=np.zeros((n_states, dim_x + 1)))
        return cls(states=(state,) * n_states, w0=np.zeros((n_states, dim_x + 1)))


@dataclass(frozen=True, eq=False)
class ManeuverModelSet:
    """One :class:`ModelParams` per maneuver class plus a class prior."""

    models: dict
    prior: np.ndarray = field(default_factory=lambda: np.full(len(CLASSES), 1.0 / len(CLASSES)))

    def __post_init__(self):
        models = {ManeuverClass(k): v for k, v in dict(self.models).items()}
        missing = [c.value for c in CLASSES if c not in models]
        if missing:
            raise InvalidArgumentError(f"model set is missing classes: {', '.join(missing)}")
        prior = _frozen(self.prior, (len(CLASSES),), "prior")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("prior must be non-negative and sum to 1")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "prior", prior)

    def __getitem__(self, cls: ManeuverClass) -> ModelParams:
        return self.models[ManeuverClass(cls)]


def _check_dim(vec, dim, name):
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (dim,):
        raise InvalidArgumentError(f"{name} must have shape ({dim},), got {vec.shape}")
    return vec


def transition_row(state: StateParams, x) -> np.ndarray:
    """P(Y_t = j | Y_{t-1} = this state, x_t) for every destination j."""
    x = _check_dim(x, state.dim_x, "x")
    return softmax(state.w_rows @ augment(x))


def initial_row(params: ModelParams, x1) -> np.ndarray:
    """P(Y_1 = j | x_1): softmax over ``w0_j . [1, x_1]``."""
    x1 = _check_dim(x1, params.dim_x, "x1")
    if params.w0.shape != (params.n_states, params.dim_x + 1):
        raise InvalidArgumentError("w0 has the wrong shape")
    return softmax(params.w0 @ augment(x1))


def emission_mean(state: StateParams, x, z_prev) -> np.ndarray:
    x = _check_dim(x, state.dim_x, "x")
    z_prev = _check_dim(z_prev, state.dim_z, "z_prev")
    c = 1.0 + state.a @ x + state.b @ z_prev
    return c * state.mu


def emission_logpdf(state: StateParams, z, x, z_prev) -> float:
    """log N(z | emission_mean(x, z_prev), sigma)."""
    z = _check_dim(z, state.dim_z, "z")
    diff = z - emission_mean(state, x, z_prev)
    L = state.chol
    y = np.linalg.solve(L, diff)
    log_det = 2.0 * np.log(np.diag(L)).sum()
    return float(-0.5 * (state.dim_z * LOG_2PI + log_det + y @ y))


def sample_sequence(params: ModelParams, inputs, seed: int):
    """Draw a latent path and outputs for the given inputs.

    Returns ``(path, z)`` with ``path`` an int array of length K and ``z`` a
    K x dim_z array.  Deterministic in ``seed``.
    """
    X = np.asarray(inputs, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] != params.dim_x:
        raise InvalidArgumentError(f"inputs must be K x {params.dim_x} with K >= 1")
    rng = np.random.default_rng(seed)
    K = X.shape[0]
    path = np.empty(K, dtype=int)
    Z = np.empty((K, params.dim_z))
    z_prev = np.zeros(params.dim_z)
    probs = initial_row(params, X[0])
    for t in range(K):
        if t > 0:
            probs = transition_row(params.states[path[t - 1]], X[t])
        path[t] = rng.choice(params.n_states, p=probs)
        state = params.states[path[t]]
        mean = emission_mean(state, X[t], z_prev)
        Z[t] = mean + state.chol @ rng.standard_normal(params.dim_z)
        z_prev = Z[t]
    return path, Z


def validate(params: ModelParams) -> list[str]:
    """Return human-readable problems with ``params``; empty when valid."""
    problems = []
    S = params.n_states
    dx, dz = params.dim_x, params.dim_z
    w0 = np.asarray(params.w0)
    if w0.shape != (S, dx + 1):
        problems.append(f"w0 has shape {w0.shape}, expected {(S, dx + 1)}")
    elif not np.all(np.isfinite(w0)):
        problems.append("w0 has non-finite entries")
    for i, s in enumerate(params.states):
        if s.dim_x != dx or s.dim_z != dz:
            problems.append(f"state {i}: dimensions ({s.dim_x}, {s.dim_z}) differ from ({dx}, {dz})")
            continue
        if s.w_rows.shape != (S, dx + 1):
            problems.append(f"state {i}: w_rows has shape {s.w_rows.shape}, expected {(S, dx + 1)}")
        for name in ("mu", "a", "b", "sigma", "w_rows"):
            if not np.all(np.isfinite(getattr(s, name))):
                problems.append(f"state {i}: {name} has non-finite entries")
        sig = s.sigma
        if not np.all(np.isfinite(sig)):
            continue
        if not np.allclose(sig, sig.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sig).max())):
            problems.append(f"state {i}: sigma is not symmetric")
        elif np.linalg.eigvalsh(sig).min() <= 0:
            problems.append(f"state {i}: sigma is not positive definite")
    return problems


def random_params(n_states: int, rng, dim_x: int = DIM_X, dim_z: int = DIM_Z,
                  scale: float = 1.0) -> ModelParams:
    """Random valid parameters; handy for tests and benchmarks."""
    rng = np.random.default_rng(rng)
    states = []
    for _ in range(n_states):
        m = rng.standard_normal((dim_z, dim_z))
        sigma = m @ m.T / dim_z + 0.5 * np.eye(dim_z)
        states.append(StateParams(
            mu=scale * rng.standard_normal(dim_z),
            a=0.1 * rng.standard_normal(dim_x),
            b=0.1 * rng.standard_normal(dim_z),
            sigma=sigma,
            w_rows=rng.standard_normal((n_states, dim_x + 1))))
    return ModelParams(states=tuple(states), w0=rng.standard_normal((n_states, dim_x + 1)))


def stack_sequences(seqs: Sequence[FeatureSequence]):
    """Stack equal-length sequences into (N, K, dim) arrays ``x, z, z_prev``."""
    X = np.stack([s.x for s in seqs])
    Z = np.stack([s.z for s in seqs])
    Zp = np.concatenate([np.zeros_like(Z[:, :1]), Z[:, :-1]], axis=1)
    return X, Z, Zp


def log_transition_tensor(params: ModelParams, X) -> np.ndarray:
    """log P(Y_t = j | Y_{t-1} = i, x_t) as an (N, K, S, S) array."""
    scores = np.einsum("ijd,nkd->nkij", params.w_tensor, augment(X))
    return log_softmax(scores, axis=-1)


def log_initial_matrix(params: ModelParams, X) -> np.ndarray:
    """log P(Y_1 = j | x_1) as an (N, S) array."""
    return log_softmax(augment(X[:, 0]) @ params.w0.T, axis=-1)


def modulation(params: ModelParams, X, Zp) -> np.ndarray:
    """The mean multipliers ``c_it`` as an (N, K, S) array."""
    return 1.0 + X @ params.a_mat.T + Zp @ params.b_mat.T


def log_emission_tensor(params: ModelParams, X, Z, Zp) -> np.ndarray:
    """log N(z_t | c_it mu_i, sigma_i) as an (N, K, S) array."""
    c = modulation(params, X, Zp)
    diff = Z[:, :, None, :] - c[..., None] * params.mus
    y = np.einsum("sij,nksj->nksi", params.chol_inv, diff)
    maha = np.einsum("nksi,nksi->nks", y, y)
    return -0.5 * (params.dim_z * LOG_2PI + params.log_dets + maha)
