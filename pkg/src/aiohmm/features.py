"""Inside (head motion) and outside (road, speed) feature construction.

Per frame, matched facial points give a 9-vector: a 4-bin histogram of
horizontal motions, a 4-bin histogram of motion angles and the face-center
displacement.  Twenty frames are summed and L2-normalized into one chunk.
Outside features take the lane and road-artifact bits of the chunk's last
frame plus speed statistics over the trailing five seconds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .model import FeatureSequence, ManeuverClass, OutsideFeature

log = logging.getLogger(__name__)

HORIZONTAL_EDGES = np.array([-2.0, 0.0, 2.0])
CHUNK_FRAMES = 20
SPEED_WINDOW_S = 5.0
DEFAULT_HORIZON_S = 5.0
_TIME_EPS = 1e-9


@dataclass(frozen=True)
class FrameRecord:
    t: float
    point_motions: tuple = ()
    face_center_dx: float = 0.0
    lane_left: int = 0
    lane_right: int = 0
    road_artifact: int = 0
    speed: float = 0.0


@dataclass
class RawTrace:
    frames: list
    frame_rate: float = 25.0

    def __post_init__(self):
        if not self.frames:
            raise InvalidArgumentError("a trace needs at least one frame")
        if not self.frame_rate > 0:
            raise InvalidArgumentError("frame_rate must be positive")

    @property
    def t_start(self) -> float:
        return self.frames[0].t

    @property
    def t_end(self) -> float:
        return self.frames[-1].t


@dataclass(frozen=True)
class Annotation:
    maneuver: ManeuverClass
    t_start: float

    def __post_init__(self):
        object.__setattr__(self, "maneuver", ManeuverClass(self.maneuver))


def face_histogram(frame: FrameRecord) -> np.ndarray:
    """Raw per-frame head-motion feature in R^9 (unnormalized counts)."""
    out = np.zeros(9)
    pts = np.asarray(frame.point_motions, dtype=float).reshape(-1, 2)
    if len(pts):
        dx, dy = pts[:, 0], pts[:, 1]
        out[:4] = np.bincount(np.digitize(dx, HORIZONTAL_EDGES), minlength=4)
        angle = np.mod(np.arctan2(dy, dx), 2.0 * math.pi)
        quadrant = np.minimum((angle // (math.pi / 2)).astype(int), 3)
        out[4:8] = np.bincount(quadrant, minlength=4)
    out[8] = frame.face_center_dx
    return out


def aggregate_inside(chunk) -> np.ndarray:
    """Sum twenty per-frame vectors and scale to unit Euclidean norm."""
    chunk = np.asarray(chunk, dtype=float)
    if chunk.shape != (CHUNK_FRAMES, 9):
        raise InvalidArgumentError(f"a chunk needs exactly {CHUNK_FRAMES} frame vectors of size 9, got {chunk.shape}")
    return _normalize(chunk.sum(axis=0))


def _normalize(v):
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.zeros_like(v)


def outside_vector(chunk_frames: Sequence[FrameRecord], speed_window) -> OutsideFeature:
    speeds = np.asarray(speed_window, dtype=float)
    if speeds.size == 0:
        raise InvalidArgumentError("speed window is empty")
    last = chunk_frames[-1]
    return OutsideFeature(int(last.lane_left), int(last.lane_right), int(last.road_artifact),
                          float(speeds.mean()), float(speeds.max()), float(speeds.min()))


class TraceFeaturizer:
    """Precomputes per-frame arrays of a trace so that any window can be
    featurized in O(window) without touching the frame records again."""

    def __init__(self, trace: RawTrace, chunk_frames: int = CHUNK_FRAMES):
        self.trace = trace
        self.chunk_frames = chunk_frames
        frames = trace.frames
        self.times = np.array([f.t for f in frames], dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise InvalidArgumentError("frame times must be strictly increasing")
        self.phi = np.stack([face_histogram(f) for f in frames])
        self.bits = np.array([(f.lane_left, f.lane_right, f.road_artifact) for f in frames], dtype=float)
        self.speed = np.array([f.speed for f in frames], dtype=float)
        if np.any(self.speed < 0):
            raise InvalidArgumentError("speeds must be non-negative")
        self._cum_phi = np.vstack([np.zeros(9), np.cumsum(self.phi, axis=0)])

    @property
    def chunk_duration_s(self) -> float:
        return self.chunk_frames / self.trace.frame_rate

    def n_chunks(self, horizon_s: float) -> int:
        return int(math.floor(horizon_s / self.chunk_duration_s + _TIME_EPS))

    def covers(self, t_end: float, horizon_s: float) -> bool:
        return t_end - horizon_s >= self.times[0] - _TIME_EPS and t_end <= self.times[-1] + _TIME_EPS

    def window(self, t_end: float, horizon_s: float = DEFAULT_HORIZON_S):
        """(x, z) arrays for the chunks ending at the last frame at or before ``t_end``."""
        if not self.covers(t_end, horizon_s):
            raise InvalidArgumentError(f"trace does not cover [{t_end - horizon_s:.3f}, {t_end:.3f}] s")
        K = self.n_chunks(horizon_s)
        m = self.chunk_frames
        end = int(np.searchsorted(self.times, t_end + _TIME_EPS, side="right"))  # exclusive
        start = end - K * m
        if start < 0:
            raise InvalidArgumentError(f"not enough frames before t={t_end:.3f} s for {K} chunks")
        bounds = start + m * np.arange(K + 1)
        sums = self._cum_phi[bounds[1:]] - self._cum_phi[bounds[:-1]]
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        z = np.divide(sums, norms, out=np.zeros_like(sums), where=norms > 0)
        last = bounds[1:] - 1
        lo = np.searchsorted(self.times, self.times[last] - SPEED_WINDOW_S + _TIME_EPS, side="left")
        x = np.empty((K, 6))
        x[:, :3] = self.bits[last]
        for k in range(K):
            sp = self.speed[lo[k]:last[k] + 1]
            x[k, 3:] = (sp.mean(), sp.max(), sp.min())
        return x, z

    def sequence(self, t_end: float, horizon_s: float = DEFAULT_HORIZON_S, label=None) -> FeatureSequence:
        x, z = self.window(t_end, horizon_s)
        return FeatureSequence(x=x, z=z, label=label, chunk_duration_s=self.chunk_duration_s)


def featurize_trace(trace: RawTrace, annotations: Sequence[Annotation],
                    horizon_s: float = DEFAULT_HORIZON_S, featurizer: TraceFeaturizer | None = None):
    """One labeled sequence per annotation, from the window ending at its start.

    Annotations without a full window of context are skipped with a warning.
    """
    fz = featurizer or TraceFeaturizer(trace)
    out = []
    for ann in annotations:
        if not fz.covers(ann.t_start, horizon_s):
            log.warning("skipping %s at t=%.3f s: trace does not cover the %.1f s context window",
                        ann.maneuver.value, ann.t_start, horizon_s)
            continue
        out.append(fz.sequence(ann.t_start, horizon_s, label=ann.maneuver))
    return out
