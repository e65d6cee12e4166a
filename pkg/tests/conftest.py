import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from aiohmm.model import FeatureSequence, random_params  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_sequence(rng, K, label=None, dim_x=6, dim_z=9):
    x = np.column_stack([rng.integers(0, 2, size=(K, 3)), rng.uniform(0, 2, size=(K, 3))])
    z = rng.standard_normal((K, dim_z))
    return FeatureSequence(x=x, z=z, label=label)


def random_instance(seed, S=None, K=None):
    rng = np.random.default_rng(seed)
    S = S if S is not None else int(rng.integers(1, 4))
    K = K if K is not None else int(rng.integers(1, 7))
    return random_params(S, rng), random_sequence(rng, K)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sample_inputs(rng, K, dim_x=6):
    return np.column_stack([rng.integers(0, 2, size=(K, 3)), rng.uniform(0, 2, size=(K, 3))])


def sample_dataset(params, n, K, seed, label=None):
    """n sequences drawn from ``params`` with random binary/continuous inputs."""
    from aiohmm.model import sample_sequence
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        X = sample_inputs(rng, K, params.dim_x)
        _, Z = sample_sequence(params, X, seed=int(rng.integers(2**31)))
        out.append(FeatureSequence(x=X, z=Z, label=label))
    return out


def known_model(n_states, seed, b_scale=0.1, sep=3.0, sigma_scale=0.5):
    """A well-conditioned model with separated means and informative transitions."""
    from aiohmm.model import ModelParams, StateParams
    rng = np.random.default_rng(seed)
    states = []
    for i in range(n_states):
        m = rng.standard_normal((9, 9))
        sigma = sigma_scale * (m @ m.T / 9 + 0.5 * np.eye(9))
        mu = rng.standard_normal(9)
        mu[i % 9] += sep
        w = 0.5 * rng.standard_normal((n_states, 7))
        w[i, 0] += 1.5  # sticky
        states.append(StateParams(mu=mu, a=0.2 * rng.standard_normal(6), b=b_scale * rng.standard_normal(9),
                                  sigma=sigma, w_rows=w))
    return ModelParams(states=tuple(states), w0=0.5 * rng.standard_normal((n_states, 7)))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
