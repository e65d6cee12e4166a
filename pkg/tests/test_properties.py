"""Property-based checks of the invariants each module promises."""
import json
import math

import numpy as np
from hypothesis import assume, given, strategies as st

from aiohmm import io
from aiohmm.anticipation import MetricCounts, ProtocolConfig, gate, score
from aiohmm.features import Annotation, FrameRecord, aggregate_inside, face_histogram, outside_vector
from aiohmm.inference import forward_backward, posteriors_from_logliks, sequence_loglik
from aiohmm.learning import e_step
from aiohmm.model import (CLASSES, STRAIGHT, ManeuverModelSet, ModelParams, StateParams, emission_logpdf,
                          initial_row, random_params, transition_row)

from conftest import random_instance, random_sequence
from oracles import dense_gaussian_logpdf, enumerate_loglik

seeds = st.integers(0, 2**32 - 1)
finite = st.floats(-50, 50, allow_nan=False)


# -- core model ------------------------------------------------------------------

@given(seeds, st.integers(1, 6), st.floats(-20, 20))
def test_transition_rows_are_shift_invariant_distributions(seed, S, shift):
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 3, size=(S, 7))
    x = rng.normal(0, 2, size=6)
    state = StateParams(mu=np.zeros(9), a=np.zeros(6), b=np.zeros(9), sigma=np.eye(9), w_rows=w)
    p = transition_row(state, x)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p > 0)
    common = rng.normal(0, 1, size=7) * shift
    q = transition_row(state.replace(w_rows=w + common), x)
    np.testing.assert_allclose(p, q, atol=1e-10)
    params = ModelParams(states=(state,) * S, w0=w)
    r = initial_row(params, x)
    assert abs(r.sum() - 1) < 1e-12 and np.all(r > 0)


@given(seeds)
def test_emission_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((9, 9))
    sigma = m @ m.T + rng.uniform(0.05, 2) * np.eye(9)
    s = StateParams(mu=rng.standard_normal(9), a=0.3 * rng.standard_normal(6), b=0.3 * rng.standard_normal(9),
                    sigma=sigma, w_rows=np.zeros((1, 7)))
    z, x, zp = rng.standard_normal(9), rng.standard_normal(6), rng.standard_normal(9)
    ref = dense_gaussian_logpdf(z, (1 + s.a @ x + s.b @ zp) * s.mu, sigma)
    assert abs(emission_logpdf(s, z, x, zp) - ref) < 1e-10 * max(1.0, abs(ref))


# -- inference -------------------------------------------------------------------

@given(seeds, st.integers(1, 3), st.integers(1, 6))
def test_forward_pass_matches_enumeration(seed, S, K):
    p, seq = random_instance(seed, S=S, K=K)
    ref = enumerate_loglik(p, seq.x, seq.z)
    assert abs(sequence_loglik(p, seq) - ref) / abs(ref) < 1e-9


@given(seeds, st.integers(1, 4), st.integers(1, 8))
def test_posteriors_are_consistent(seed, S, K):
    p, seq = random_instance(seed, S=S, K=K)
    fb = forward_backward(p, seq)
    np.testing.assert_allclose(fb.gamma.sum(axis=1), 1.0, atol=1e-9)
    if K > 1:
        np.testing.assert_allclose(fb.xi.sum(axis=(1, 2)), 1.0, atol=1e-9)
        np.testing.assert_allclose(fb.xi.sum(axis=1), fb.gamma[1:], atol=1e-9)
        np.testing.assert_allclose(fb.xi.sum(axis=2), fb.gamma[:-1], atol=1e-9)


@given(seeds, st.integers(2, 4), st.integers(1, 6))
def test_relabeling_states_keeps_likelihood(seed, S, K):
    p, seq = random_instance(seed, S=S, K=K)
    perm = np.random.default_rng(seed).permutation(S)
    states = tuple(p.states[i].replace(w_rows=p.states[i].w_rows[perm]) for i in perm)
    q = ModelParams(states=states, w0=p.w0[perm])
    a, b = sequence_loglik(p, seq), sequence_loglik(q, seq)
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


@given(seeds, st.floats(1e-3, 1e3))
def test_prior_scaling_leaves_posteriors(seed, scale):
    rng = np.random.default_rng(seed)
    L = rng.normal(-100, 30, size=5)
    prior = rng.uniform(0.01, 1, size=5)
    a = posteriors_from_logliks(L, prior)
    np.testing.assert_allclose(a, posteriors_from_logliks(L, scale * prior), atol=1e-12)
    assert abs(a.sum() - 1) < 1e-12


# -- learning --------------------------------------------------------------------

@given(seeds)
def test_e_step_is_order_independent(seed):
    rng = np.random.default_rng(seed)
    p = random_params(2, rng)
    seqs = [random_sequence(rng, int(k)) for k in rng.integers(1, 6, size=12)]
    _, a = e_step(p, seqs)
    _, b = e_step(p, [seqs[i] for i in rng.permutation(len(seqs))])
    assert abs(a - b) <= 1e-9 * abs(a)


# -- features --------------------------------------------------------------------

points = st.lists(st.tuples(finite, finite), max_size=30)


@given(points, finite)
def test_histogram_counts_match_points(pts, fc):
    out = face_histogram(FrameRecord(t=0.0, point_motions=tuple(pts), face_center_dx=fc))
    assert out[:4].sum() == len(pts) and out[4:8].sum() == len(pts)
    assert out[8] == fc


@given(st.lists(points, min_size=20, max_size=20), st.lists(finite, min_size=20, max_size=20))
def test_aggregated_norm_is_zero_or_one(chunk_pts, fcs):
    chunk = np.stack([face_histogram(FrameRecord(t=0.0, point_motions=tuple(p), face_center_dx=f))
                      for p, f in zip(chunk_pts, fcs)])
    n = np.linalg.norm(aggregate_inside(chunk))
    assert n == 0.0 or abs(n - 1) < 1e-12


@given(st.lists(st.floats(0, 250, allow_nan=False), min_size=1, max_size=150))
def test_speed_statistics_ordered(speeds):
    v = outside_vector([FrameRecord(t=0.0)], speeds)
    assert v.speed_min <= v.speed_avg + 1e-12 and v.speed_avg <= v.speed_max + 1e-12


# -- protocol --------------------------------------------------------------------

@st.composite
def streams(draw):
    seed = draw(seeds)
    rng = np.random.default_rng(seed)
    n = draw(st.integers(1, 120))
    times = 5.0 + 0.8 * np.arange(n)
    P = rng.dirichlet(np.full(5, draw(st.floats(0.05, 2.0))), size=n)
    n_man = draw(st.integers(0, 8))
    anns = sorted((Annotation(CLASSES[int(rng.integers(5))], float(t))
                   for t in rng.uniform(0, times[-1] + 6.0, size=n_man)), key=lambda a: a.t_start)
    th = draw(st.floats(0.05, 0.95))
    lockout = draw(st.sampled_from([2.0, 5.0, 7.5]))
    settle = draw(st.sampled_from([0.0, 5.0]))
    return times, P, anns, ProtocolConfig(threshold=th, lockout_s=lockout, settle_s=settle)


@given(streams())
def test_score_tallies_partition_predictions_and_maneuvers(data):
    times, P, anns, cfg = data
    events = gate(times, P, cfg, anns)
    m = score(events, anns, cfg)
    assert m.tp + m.fp + m.fpp == sum(e.predicted is not STRAIGHT for e in events)
    assert m.tp + m.fp + m.mp == sum(a.maneuver.is_maneuver for a in anns)
    assert len(m.tp_lead_times_s) == m.tp and all(t >= 0 for t in m.tp_lead_times_s)
    assert 0 <= m.f1 <= 1 and (m.f1 == 0) == (m.tp == 0)


@given(streams(), st.floats(0.0, 0.5))
def test_raising_threshold_never_adds_predictions(data, bump):
    # with the lockout timer alone, the gate greedily keeps openings at least
    # lockout_s apart, and that count cannot grow when openings are removed
    times, P, _, cfg = data
    assume(cfg.threshold + bump < 1)
    hi = ProtocolConfig(threshold=cfg.threshold + bump, lockout_s=cfg.lockout_s, settle_s=cfg.settle_s)
    lo_m, hi_m = score(gate(times, P, cfg), [], cfg), score(gate(times, P, hi), [], hi)
    assert hi_m.tp + hi_m.fp + hi_m.fpp <= lo_m.tp + lo_m.fp + lo_m.fpp


@given(streams())
def test_lockout_gap_unless_maneuver_between(data):
    times, P, anns, cfg = data
    preds = [e.t for e in gate(times, P, cfg, anns) if e.predicted is not STRAIGHT]
    starts = [a.t_start for a in anns if a.maneuver.is_maneuver]
    for a, b in zip(preds, preds[1:]):
        assert b - a >= cfg.lockout_s - 1e-9 or any(a < s <= b + 1e-9 for s in starts)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metric_formulas(tp, fp, fpp, mp):
    m = MetricCounts(tp, fp, fpp, mp)
    pr = tp / (tp + fp + fpp) if tp + fp + fpp else 0.0
    re = tp / (tp + fp + mp) if tp + fp + mp else 0.0
    assert m.precision == pr and m.recall == re
    assert math.isclose(m.f1, 2 * pr * re / (pr + re) if pr + re else 0.0)


# -- serialization ---------------------------------------------------------------

@given(seeds, st.integers(1, 3), st.floats(1e-300, 1e300))
def test_model_json_round_trip(seed, S, scale):
    rng = np.random.default_rng(seed)
    ms = ManeuverModelSet({c: random_params(S, rng) for c in CLASSES})
    p = ms[CLASSES[0]]
    st0 = p.states[0].replace(mu=p.states[0].mu * scale)
    ms = ManeuverModelSet({**{c: ms[c] for c in CLASSES}, CLASSES[0]: p.replace(states=(st0,) + p.states[1:])})
    back = io.model_set_from_json(json.loads(json.dumps(io.model_set_to_json(ms))))
    for c in CLASSES:
        for s, t in zip(ms[c].states, back[c].states):
            for name in ("mu", "a", "b", "sigma", "w_rows"):
                np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
