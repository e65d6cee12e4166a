"""Synthetic driving episodes with ground-truth maneuvers and cue timing.

The generator models the qualitative structure drivers show before a
maneuver: a head turn (glance) toward the maneuver side starting a variable
time before it, lane bits consistent with which lane changes are legal, a
road-artifact bit raised when approaching a turn, and lower speeds around
turns.  Turns get a longer glance than lane changes.  Straight driving
contains intersections crossed without turning (artifact bit, a mild
slow-down and sometimes a short glance) and occasional random glances.

Head motion is generated as a per-frame yaw velocity of the face plus a
slow random sway; every tracked facial point moves with it plus isotropic
noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .features import Annotation, FrameRecord, RawTrace
from .model import STRAIGHT, ManeuverClass

LEFT, RIGHT = -1, 1
MIN_SEPARATION_S = 10.0
# Straight-driving annotations keep this far from any maneuver start.
STRAIGHT_CLEARANCE_S = 6.0
SWAY_TIME_S = 1.0
SWAY_FRACTION = 0.5  # sway std relative to noise_sigma


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float = 600.0
    frame_rate: float = 25.0
    maneuver_rate: float = 2.0          # per minute
    cue_lead_range_s: tuple = (1.0, 5.0)
    cue_strength: float = 5.0           # head yaw speed during a glance, px/frame
    noise_sigma: float = 0.8            # per-point motion noise, px
    seed: int = 0
    horizon_s: float = 5.0
    n_points: int = 12
    intersection_rate: float = 0.5      # straight-through intersections per minute
    distractor_rate: float = 0.25       # random glances per minute
    straight_per_maneuver: float = 1.0  # driving-straight annotations per maneuver

    def __post_init__(self):
        lo, hi = self.cue_lead_range_s
        if not (0 < lo <= hi <= self.horizon_s):
            raise InvalidArgumentError("cue_lead_range_s must satisfy 0 < min <= max <= horizon")
        if self.duration_s < self.horizon_s + 2 * MIN_SEPARATION_S:
            raise InvalidArgumentError("duration too short for a single maneuver with context")
        if self.frame_rate <= 0 or self.cue_strength < 0 or self.noise_sigma < 0 or self.maneuver_rate < 0:
            raise InvalidArgumentError("frame_rate must be positive; strengths and rates non-negative")


@dataclass
class Episode:
    trace: RawTrace
    annotations: list
    injected_cue_times: list = field(default_factory=list)

    @property
    def maneuvers(self) -> list:
        return [a for a in self.annotations if a.maneuver.is_maneuver]


def _spaced_times(rng, n, lo, hi, gap):
    """n sorted times in [lo, hi] with consecutive gaps >= gap."""
    slack = hi - lo - (n - 1) * gap
    if n and slack < 0:
        raise InvalidArgumentError(
            f"cannot place {n} maneuvers {gap:.0f} s apart in {hi - lo:.1f} s; lower maneuver_rate")
    u = np.sort(rng.uniform(0.0, slack, size=n))
    return lo + u + gap * np.arange(n)


class _Timeline:
    """Per-frame signal buffers the schedule writes into."""

    def __init__(self, n, rate):
        self.rate = rate
        self.n = n
        self.yaw_speed = np.zeros(n)
        self.artifact = np.zeros(n, dtype=int)
        self.speed_factor = np.ones(n)

    def idx(self, t):
        return int(round(t * self.rate))

    def glance(self, t0, side, strength, rng, hold=None):
        """Quick head turn out, hold, and a slower return; returns the end time."""
        out, back = 0.4, 1.2
        hold = rng.uniform(0.3, 0.8) if hold is None else hold
        i0 = self.idx(t0)
        i1 = i0 + self.idx(out)
        i2 = i1 + self.idx(hold)
        i3 = i2 + self.idx(back)
        self.yaw_speed[max(i0, 0):max(min(i1, self.n), 0)] += side * strength
        self.yaw_speed[max(i2, 0):max(min(i3, self.n), 0)] -= side * strength * out / back
        return i3 / self.rate

    def dip(self, t_center, depth, before, after):
        t = np.arange(self.n) / self.rate
        rise = np.clip((t - (t_center - before)) / max(before, 1e-9), 0, 1)
        fall = np.clip(((t_center + after) - t) / max(after, 1e-9), 0, 1)
        shape = np.minimum(rise, fall)
        self.speed_factor = np.minimum(self.speed_factor, 1.0 - depth * shape)


def generate_episode(cfg: ScenarioConfig) -> Episode:
    """Deterministic synthetic episode for ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    rate = cfg.frame_rate
    n = int(round(cfg.duration_s * rate))
    tl = _Timeline(n, rate)

    lead_max = cfg.cue_lead_range_s[1]
    first = cfg.horizon_s + lead_max + 1.0
    last = cfg.duration_s - 2.0
    n_man = int(round(cfg.maneuver_rate * cfg.duration_s / 60.0))
    starts = _spaced_times(rng, n_man, first, last, MIN_SEPARATION_S)

    n_lanes = int(rng.integers(2, 5))
    lane = int(rng.integers(0, n_lanes))
    layouts = [(0, lane, n_lanes)]  # (frame index, lane, number of lanes) from then on
    annotations, cue_times = [], []
    for t_m in starts:
        legal = [ManeuverClass.LEFT_TURN, ManeuverClass.RIGHT_TURN]
        if lane > 0:
            legal.append(ManeuverClass.LEFT_LANE_CHANGE)
        if lane < n_lanes - 1:
            legal.append(ManeuverClass.RIGHT_LANE_CHANGE)
        man = legal[int(rng.integers(len(legal)))]
        side = LEFT if man in (ManeuverClass.LEFT_LANE_CHANGE, ManeuverClass.LEFT_TURN) else RIGHT
        lead = rng.uniform(*cfg.cue_lead_range_s)
        t_cue = t_m - lead
        turn = man in (ManeuverClass.LEFT_TURN, ManeuverClass.RIGHT_TURN)
        # a turn gets a longer look than a lane-change mirror check
        tl.glance(t_cue, side, cfg.cue_strength, rng,
                  hold=rng.uniform(0.8, 1.5) if turn else rng.uniform(0.3, 0.7))
        if turn:
            # the driver notices the intersection shortly before looking
            a0 = tl.idx(t_cue - rng.uniform(0.5, 1.5))
            tl.artifact[max(a0, 0):min(tl.idx(t_m + 2.0), n)] = 1
            tl.dip(t_m, rng.uniform(0.55, 0.7), before=t_m - a0 / rate, after=4.0)
            n_lanes = int(rng.integers(2, 5))
            lane = int(rng.integers(0, n_lanes))
            layouts.append((tl.idx(t_m + 2.0), lane, n_lanes))
        else:
            lane += 1 if side == RIGHT else -1
            layouts.append((tl.idx(t_m + 1.5), lane, n_lanes))
        annotations.append(Annotation(man, float(t_m)))
        cue_times.append(float(t_cue))

    def clear_of_maneuvers(t, margin):
        return all(abs(t - s) >= margin for s in starts) and all(
            not (s - lead_max - 2.0 <= t <= s + 2.0) for s in starts)

    # intersections crossed straight: artifact bit, mild slow-down, sometimes a glance
    n_int = int(round(cfg.intersection_rate * cfg.duration_s / 60.0))
    for t_c in rng.uniform(cfg.horizon_s + 2.0, cfg.duration_s - 3.0, size=n_int):
        if not clear_of_maneuvers(t_c, STRAIGHT_CLEARANCE_S + 2.0):
            continue
        a0 = tl.idx(t_c - rng.uniform(2.0, 4.0))
        tl.artifact[max(a0, 0):min(tl.idx(t_c + 1.0), n)] = 1
        tl.dip(t_c, rng.uniform(0.05, 0.2), before=4.0, after=3.0)
        if rng.random() < 0.5:
            tl.glance(t_c - rng.uniform(1.0, 3.0), LEFT if rng.random() < 0.5 else RIGHT,
                      cfg.cue_strength, rng, hold=rng.uniform(0.1, 0.4))

    n_dis = int(round(cfg.distractor_rate * cfg.duration_s / 60.0))
    for t_g in rng.uniform(0.0, cfg.duration_s - 2.0, size=n_dis):
        if not clear_of_maneuvers(t_g, lead_max + 2.0):
            continue
        tl.glance(t_g, LEFT if rng.random() < 0.5 else RIGHT, cfg.cue_strength, rng,
                  hold=rng.uniform(0.1, 0.4))

    # driving-straight annotations: random times clear of maneuvers
    straight_times = []
    n_straight = int(round(cfg.straight_per_maneuver * n_man))
    tries = 0
    while n_straight > 0 and tries < 1000:
        tries += 1
        t = float(rng.uniform(cfg.horizon_s + 0.5, cfg.duration_s - 0.5))
        if clear_of_maneuvers(t, STRAIGHT_CLEARANCE_S) and all(abs(t - s) > 2.0 for s in straight_times):
            straight_times.append(t)
            n_straight -= 1
    annotations += [Annotation(STRAIGHT, t) for t in straight_times]
    annotations.sort(key=lambda a: a.t_start)

    lane_left = np.zeros(n, dtype=int)
    lane_right = np.zeros(n, dtype=int)
    for k, (i0, ln, nl) in enumerate(layouts):
        i1 = layouts[k + 1][0] if k + 1 < len(layouts) else n
        lane_left[min(i0, n):min(i1, n)] = int(ln > 0)
        lane_right[min(i0, n):min(i1, n)] = int(ln < nl - 1)

    cruise = rng.uniform(55.0, 95.0)
    drift = np.cumsum(rng.normal(0.0, 0.05, size=n))
    drift -= drift.mean()
    speed = np.clip((cruise + drift) * tl.speed_factor + rng.normal(0.0, 0.5, size=n), 0.0, None)

    sig = cfg.noise_sigma
    # slow zero-mean head sway shared by all points
    phi = float(np.exp(-1.0 / (SWAY_TIME_S * rate)))
    sway_sd = SWAY_FRACTION * sig
    shocks = rng.normal(0.0, sway_sd * np.sqrt(1.0 - phi * phi), size=n)
    sway = np.empty(n)
    prev = rng.normal(0.0, sway_sd)
    for i in range(n):
        prev = phi * prev + shocks[i]
        sway[i] = prev
    yaw = tl.yaw_speed + sway
    frames = []
    for i in range(n):
        v = yaw[i]
        pts = np.column_stack([v + sig * rng.standard_normal(cfg.n_points),
                               sig * rng.standard_normal(cfg.n_points)])
        frames.append(FrameRecord(
            t=i / rate,
            point_motions=tuple(map(tuple, np.round(pts, 6).tolist())),
            face_center_dx=float(round(v + 0.5 * sig * rng.standard_normal(), 6)),
            lane_left=int(lane_left[i]), lane_right=int(lane_right[i]),
            road_artifact=int(tl.artifact[i]), speed=float(round(speed[i], 6))))
    return Episode(trace=RawTrace(frames=frames, frame_rate=rate), annotations=annotations,
                   injected_cue_times=cue_times)

