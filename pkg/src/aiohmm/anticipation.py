"""Streaming maneuver anticipation and its evaluation protocol.

Every ``stride_s`` seconds the trailing ``horizon_s`` of context is scored
under each class model.  A maneuver is predicted when its posterior reaches
the threshold; after a prediction the gate stays shut for ``lockout_s`` or
until a ground-truth maneuver starts, whichever comes first.

Predictions are matched to the first maneuver that starts within
``lockout_s`` after them: same class is a true prediction (tp), another
class a false prediction (fp), no maneuver a false positive (fpp).
Maneuvers no prediction matched are missed (mp).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .features import Annotation, RawTrace, TraceFeaturizer
from .inference import _forward_backward_batch, posteriors_from_logliks
from .learning import EmConfig, fit_all
from .model import CLASSES, MANEUVERS, STRAIGHT, FeatureSequence, ManeuverClass, ManeuverModelSet, validate

THRESHOLD_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))
_EPS = 1e-9


@dataclass(frozen=True)
class ProtocolConfig:
    stride_s: float = 0.8
    horizon_s: float = 5.0
    threshold: float = 0.5
    lockout_s: float = 5.0
    # After a maneuver starts its own pre-maneuver cues stay in the trailing
    # window; anticipation pauses for this long.
    settle_s: float = 5.0

    def __post_init__(self):
        if not (self.stride_s > 0 and self.horizon_s > 0 and self.lockout_s > 0):
            raise InvalidArgumentError("stride, horizon and lockout must be positive")
        if not 0 < self.threshold < 1:
            raise InvalidArgumentError("threshold must lie in (0, 1)")
        if self.settle_s < 0:
            raise InvalidArgumentError("settle_s must be non-negative")


@dataclass(frozen=True, eq=False)
class PredictionEvent:
    t: float
    posteriors: np.ndarray
    predicted: ManeuverClass


@dataclass
class MetricCounts:
    tp: int = 0
    fp: int = 0
    fpp: int = 0
    mp: int = 0
    tp_lead_times_s: list = field(default_factory=list)

    def __add__(self, other: "MetricCounts") -> "MetricCounts":
        return MetricCounts(self.tp + other.tp, self.fp + other.fp, self.fpp + other.fpp,
                            self.mp + other.mp, self.tp_lead_times_s + other.tp_lead_times_s)

    @property
    def precision(self) -> float:
        den = self.tp + self.fp + self.fpp
        return self.tp / den if den else 0.0

    @property
    def recall(self) -> float:
        den = self.tp + self.fp + self.mp
        return self.tp / den if den else 0.0

    @property
    def f1(self) -> float:
        pr, re = self.precision, self.recall
        return 2 * pr * re / (pr + re) if pr + re > 0 else 0.0

    @property
    def mean_time_to_maneuver_s(self) -> float:
        return float(np.mean(self.tp_lead_times_s)) if self.tp_lead_times_s else math.nan

    def as_row(self) -> dict:
        return dict(tp=self.tp, fp=self.fp, fpp=self.fpp, mp=self.mp, precision=self.precision,
                    recall=self.recall, f1=self.f1, mean_time_to_maneuver_s=self.mean_time_to_maneuver_s)


class Anticipator:
    """Scores feature windows under a model set; validates the models once."""

    def __init__(self, models: ManeuverModelSet):
        for c in CLASSES:
            problems = validate(models[c])
            if problems:
                raise InvalidArgumentError(f"model for {c.value} is invalid: {problems[0]}")
        self.models = models
        self._params = [models[c] for c in CLASSES]

    def logliks(self, x, z) -> np.ndarray:
        X = np.asarray(x, dtype=float)[None]
        Z = np.asarray(z, dtype=float)[None]
        Zp = np.concatenate([np.zeros_like(Z[:, :1]), Z[:, :-1]], axis=1)
        return np.array([_forward_backward_batch(p, X, Z, Zp, want_posteriors=False)[0][0]
                         for p in self._params])

    def batch_logliks(self, X, Z) -> np.ndarray:
        """(N, 5) log-likelihoods for N equal-length windows."""
        Zp = np.concatenate([np.zeros_like(Z[:, :1]), Z[:, :-1]], axis=1)
        return np.stack([_forward_backward_batch(p, X, Z, Zp, want_posteriors=False)[0]
                         for p in self._params], axis=1)

    def posteriors(self, x, z) -> np.ndarray:
        return posteriors_from_logliks(self.logliks(x, z), self.models.prior)

    def prefix_posteriors(self, seq: FeatureSequence) -> np.ndarray:
        """(K, 5) posteriors computed on chunks 1..k for k = 1..K."""
        K = len(seq)
        L = np.empty((K, len(CLASSES)))
        Z = seq.z[None]
        Zp = np.concatenate([np.zeros_like(Z[:, :1]), Z[:, :-1]], axis=1)
        X = seq.x[None]
        for j, p in enumerate(self._params):
            _, _, _, log_scale = _forward_backward_batch(p, X, Z, Zp, want_posteriors=False)
            L[:, j] = np.cumsum(log_scale[0])
        return posteriors_from_logliks(L, self.models.prior)


def decide(posteriors, threshold: float) -> ManeuverClass:
    """Most probable maneuver if it reaches ``threshold``, else driving straight.

    Ties go to the earlier class in :data:`MANEUVERS` order.
    """
    p = np.asarray(posteriors)[: len(MANEUVERS)]
    k = int(np.argmax(p))
    return MANEUVERS[k] if p[k] >= threshold else STRAIGHT


def step_times(trace: RawTrace, cfg: ProtocolConfig) -> np.ndarray:
    t0 = trace.t_start + cfg.horizon_s
    n = int(math.floor((trace.t_end - t0) / cfg.stride_s + _EPS)) + 1
    if t0 > trace.t_end + _EPS or n < 1:
        raise InvalidArgumentError("trace is shorter than one anticipation horizon")
    return t0 + cfg.stride_s * np.arange(n)


def posterior_stream(models: ManeuverModelSet, trace: RawTrace, cfg: ProtocolConfig,
                     featurizer: TraceFeaturizer | None = None, anticipator: Anticipator | None = None):
    """Times and (n, 5) posteriors of every anticipation step."""
    fz = featurizer or TraceFeaturizer(trace)
    ant = anticipator or Anticipator(models)
    times = step_times(trace, cfg)
    windows = []
    for t in times:
        try:
            windows.append(fz.window(t, cfg.horizon_s))
        except InvalidArgumentError as exc:
            raise InvalidArgumentError(f"featurization failed at t={t:.3f} s: {exc}") from exc
    X = np.stack([w[0] for w in windows])
    Z = np.stack([w[1] for w in windows])
    P = posteriors_from_logliks(ant.batch_logliks(X, Z), models.prior)
    return times, P


def _maneuver_times(annotations) -> np.ndarray:
    return np.sort([a.t_start for a in annotations if a.maneuver.is_maneuver]) if annotations else np.empty(0)


def gate(times, posteriors, cfg: ProtocolConfig, annotations: Sequence[Annotation] = ()) -> list[PredictionEvent]:
    """Apply threshold, lockout and settle rules to a posterior stream."""
    starts = _maneuver_times(annotations)
    events = []
    last_pred = None
    for t, p in zip(times, posteriors):
        pred = decide(p, cfg.threshold)
        if pred is not STRAIGHT:
            if last_pred is not None and t - last_pred < cfg.lockout_s - _EPS:
                if not np.any((starts > last_pred) & (starts <= t + _EPS)):
                    pred = STRAIGHT
            if pred is not STRAIGHT and np.any((starts < t - _EPS) & (t < starts + cfg.settle_s - _EPS)):
                pred = STRAIGHT
        if pred is not STRAIGHT:
            last_pred = t
        events.append(PredictionEvent(float(t), np.asarray(p), pred))
    return events


def stream_anticipate(models: ManeuverModelSet, trace: RawTrace, cfg: ProtocolConfig,
                      annotations: Sequence[Annotation] = (), featurizer: TraceFeaturizer | None = None) -> list[PredictionEvent]:
    """Run the anticipation loop over a whole trace.

    ``annotations`` supplies the ground-truth maneuver starts that release
    the lockout early; without them only the lockout timer applies.
    """
    times, P = posterior_stream(models, trace, cfg, featurizer)
    return gate(times, P, cfg, annotations)


def _match(events: Sequence[PredictionEvent], annotations: Sequence[Annotation], cfg: ProtocolConfig):
    """Yield (predicted, actual, lead) triples; actual is STRAIGHT for fpp and
    predicted is STRAIGHT for missed maneuvers."""
    ts = [e.t for e in events]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise InvalidArgumentError("events must be ordered by time")
    maneuvers = sorted((a for a in annotations if a.maneuver.is_maneuver), key=lambda a: a.t_start)
    starts = np.array([a.t_start for a in maneuvers])
    matched = np.zeros(len(maneuvers), dtype=bool)
    pairs = []
    for e in events:
        if e.predicted is STRAIGHT:
            continue
        cand = np.flatnonzero((starts >= e.t - _EPS) & (starts <= e.t + cfg.lockout_s + _EPS) & ~matched)
        if len(cand):
            k = int(cand[0])
            matched[k] = True
            pairs.append((e.predicted, maneuvers[k].maneuver, maneuvers[k].t_start - e.t))
        else:
            pairs.append((e.predicted, STRAIGHT, None))
    for k in np.flatnonzero(~matched):
        pairs.append((STRAIGHT, maneuvers[k].maneuver, None))
    return pairs


def _count(pairs) -> MetricCounts:
    m = MetricCounts()
    for pred, actual, lead in pairs:
        if pred is STRAIGHT:
            m.mp += 1
        elif actual is STRAIGHT:
            m.fpp += 1
        elif pred is actual:
            m.tp += 1
            m.tp_lead_times_s.append(max(0.0, float(lead)) if lead is not None else 0.0)
        else:
            m.fp += 1
    return m


def score(events: Sequence[PredictionEvent], annotations: Sequence[Annotation], cfg: ProtocolConfig) -> MetricCounts:
    """tp/fp/fpp/mp tallies; precision, recall and F1 are properties of the result."""
    return _count(_match(events, annotations, cfg))


def confusion_matrix(events, annotations, cfg: ProtocolConfig) -> np.ndarray:
    """5x5 counts, rows = predicted class, columns = actual class."""
    M = np.zeros((len(CLASSES), len(CLASSES)), dtype=int)
    for pred, actual, _ in _match(events, annotations, cfg):
        M[pred.index, actual.index] += 1
    return M


# ---------------------------------------------------------------------------
# clip-level evaluation on labeled feature windows


def clip_outcome(prefix_posteriors, label: ManeuverClass, threshold: float, chunk_duration_s: float):
    """Anticipate along one labeled window, committing to the first prediction.

    Returns (predicted, lead_time_s or None).
    """
    K = len(prefix_posteriors)
    for k in range(K):
        pred = decide(prefix_posteriors[k], threshold)
        if pred is not STRAIGHT:
            return pred, (K - 1 - k) * chunk_duration_s
    return STRAIGHT, None


def clip_pairs(prefix_list, labels, threshold, chunk_durations):
    pairs = []
    for P, label, dur in zip(prefix_list, labels, chunk_durations):
        pred, lead = clip_outcome(P, label, threshold, dur)
        if pred is STRAIGHT:
            pairs.append((STRAIGHT, label, None) if label.is_maneuver else None)
        else:
            pairs.append((pred, label, lead))
    return [p for p in pairs if p is not None]


def clip_confusion(prefix_list, labels, threshold, chunk_durations) -> np.ndarray:
    M = np.zeros((len(CLASSES), len(CLASSES)), dtype=int)
    for P, label, dur in zip(prefix_list, labels, chunk_durations):
        pred, _ = clip_outcome(P, label, threshold, dur)
        M[pred.index, label.index] += 1
    return M


def evaluate_clips(models: ManeuverModelSet, seqs: Sequence[FeatureSequence], thresholds: Iterable[float]):
    """MetricCounts per threshold for labeled windows scored as isolated events."""
    ant = Anticipator(models)
    prefixes = [ant.prefix_posteriors(s) for s in seqs]
    labels = [s.label for s in seqs]
    durs = [s.chunk_duration_s for s in seqs]
    return {float(th): _count(clip_pairs(prefixes, labels, th, durs)) for th in thresholds}


def fold_assignment(datasets: Mapping[ManeuverClass, Sequence], n_folds: int, seed: int) -> dict:
    """Stratified fold index for every sequence, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    folds = {}
    for c in CLASSES:
        n = len(datasets.get(c, ()))
        if n < n_folds:
            raise InvalidArgumentError(f"class {c.value} has {n} sequences, fewer than {n_folds} folds")
        f = np.empty(n, dtype=int)
        f[rng.permutation(n)] = np.arange(n) % n_folds
        folds[c] = f
    return folds


@dataclass
class SweepResult:
    rows: list
    best: dict

    def mean_rows(self) -> list:
        groups = {}
        for r in self.rows:
            groups.setdefault((r["n_states"], r["threshold"]), []).append(r)
        out = []
        for (s, th), rs in sorted(groups.items()):
            out.append(dict(n_states=s, threshold=th, fold="mean",
                            precision=float(np.mean([r["precision"] for r in rs])),
                            recall=float(np.mean([r["recall"] for r in rs])),
                            f1=float(np.mean([r["f1"] for r in rs]))))
        return out


def sweep(datasets: Mapping[ManeuverClass, Sequence[FeatureSequence]], state_counts: Sequence[int],
          thresholds: Sequence[float] = THRESHOLD_GRID, n_folds: int = 5, seed: int = 0,
          em: EmConfig | None = None, folds_to_run: Sequence[int] | None = None) -> SweepResult:
    """Cross-validate the number of states and the prediction threshold.

    Each validation window is treated as one event (see :func:`clip_outcome`).
    The configuration with the highest mean F1 is reported as ``best``.
    """
    em = em or EmConfig()
    datasets = {ManeuverClass(k): list(v) for k, v in datasets.items()}
    folds = fold_assignment(datasets, n_folds, seed)
    rows = []
    for fold in (folds_to_run if folds_to_run is not None else range(n_folds)):
        train = {c: [s for s, f in zip(datasets[c], folds[c]) if f != fold] for c in CLASSES}
        valid = [s for c in CLASSES for s, f in zip(datasets[c], folds[c]) if f == fold]
        if n_folds == 1:
            train = datasets
        for S in state_counts:
            models = fit_all(train, replace(em, n_states=int(S)))
            for th, m in evaluate_clips(models, valid, thresholds).items():
                row = dict(n_states=int(S), threshold=th, fold=int(fold))
                row.update(m.as_row())
                rows.append(row)
    rows.sort(key=lambda r: (r["n_states"], r["threshold"], r["fold"]))
    result = SweepResult(rows=rows, best={})
    means = result.mean_rows()
    result.best = max(means, key=lambda r: r["f1"]) if means else {}
    return result


# ---------------------------------------------------------------------------
# curves


def threshold_curve(streams, thresholds: Sequence[float], cfg: ProtocolConfig):
    """F1 against threshold. ``streams`` holds (times, posteriors, annotations)
    triples; posteriors are reused for every threshold."""
    out = []
    for th in thresholds:
        c = replace(cfg, threshold=float(th))
        total = MetricCounts()
        for times, P, anns in streams:
            total = total + score(gate(times, P, c, anns), anns, c)
        out.append((float(th), total.f1))
    return out


def lead_time_curve(models: ManeuverModelSet, episodes, leads: Sequence[float], cfg: ProtocolConfig):
    """F1 when every annotated event is predicted at a fixed time before it.

    ``episodes`` holds (trace, annotations) pairs.  The prediction at lead
    ``tau`` is the most probable of the five classes on the window ending
    ``tau`` seconds before the event; driving-straight annotations supply the
    negatives.
    """
    ant = Anticipator(models)
    out = []
    prepared = [(TraceFeaturizer(tr), anns) for tr, anns in episodes]
    for tau in leads:
        total = MetricCounts()
        for fz, anns in prepared:
            for a in anns:
                t = a.t_start - tau
                if not fz.covers(t, cfg.horizon_s):
                    continue
                x, z = fz.window(t, cfg.horizon_s)
                p = ant.posteriors(x, z)
                pred = CLASSES[int(np.argmax(p))]
                if pred is STRAIGHT:
                    if a.maneuver.is_maneuver:
                        total.mp += 1
                elif not a.maneuver.is_maneuver:
                    total.fpp += 1
                elif pred is a.maneuver:
                    total.tp += 1
                    total.tp_lead_times_s.append(float(tau))
                else:
                    total.fp += 1
        out.append((float(tau), total.f1))
    return out
