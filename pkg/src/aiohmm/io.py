"""Reading and writing traces, annotations, datasets, events and model sets.

Bulk data is JSON lines so errors can name the offending line.  Floats are
written with ``repr`` precision, so a save/load round trip is exact.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .anticipation import PredictionEvent
from .errors import ParseError, SchemaError
from .features import Annotation, FrameRecord, RawTrace
from .model import CLASSES, FeatureSequence, ManeuverClass, ManeuverModelSet, ModelParams, StateParams

FORMAT_VERSION = 1
TRACE_FIELDS = ("t", "point_motions", "face_center_dx", "lane_left", "lane_right", "road_artifact", "speed")
DATASET_FIELDS = ("label", "chunk_duration_s", "x", "z")
EVENT_FIELDS = ("t", "posteriors", "predicted")


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: malformed JSON ({exc.msg})", line=lineno) from exc


def _check_fields(obj, expected, where, line=None, optional=()):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected a JSON object", line=line)
    unknown = sorted(set(obj) - set(expected) - set(optional))
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {unknown}", line=line)
    missing = [k for k in expected if k not in obj]
    if missing:
        raise SchemaError(f"{where}: missing field(s) {missing}", line=line)


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _write_lines(path, rows: Iterable[dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(_dump(row) + "\n")


def _floats(a):
    return np.asarray(a, dtype=float).tolist()


# -- traces -------------------------------------------------------------------


def load_trace(path, frame_rate: float | None = None) -> RawTrace:
    """Read a per-frame trace. ``frame_rate`` defaults to the median frame spacing."""
    frames = []
    for lineno, obj in _read_jsonl(path):
        _check_fields(obj, TRACE_FIELDS, str(path), lineno)
        try:
            pts = tuple(tuple(float(v) for v in p) for p in obj["point_motions"])
            if any(len(p) != 2 for p in pts):
                raise ValueError("point motions must be [dx, dy] pairs")
            frames.append(FrameRecord(
                t=float(obj["t"]), point_motions=pts, face_center_dx=float(obj["face_center_dx"]),
                lane_left=_bit(obj["lane_left"]), lane_right=_bit(obj["lane_right"]),
                road_artifact=_bit(obj["road_artifact"]), speed=float(obj["speed"])))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: {exc}", line=lineno) from exc
    if not frames:
        raise SchemaError(f"{path}: trace has no frames")
    if frame_rate is None:
        dt = np.diff([f.t for f in frames])
        frame_rate = float(round(1.0 / np.median(dt), 6)) if len(dt) and np.median(dt) > 0 else 25.0
    return RawTrace(frames=frames, frame_rate=frame_rate)


def _bit(v):
    if v not in (0, 1) or isinstance(v, float) and not v.is_integer():
        raise ValueError(f"binary field must be 0 or 1, got {v!r}")
    return int(v)


def save_trace(trace: RawTrace, path):
    _write_lines(path, (dict(t=f.t, point_motions=[list(p) for p in f.point_motions],
                             face_center_dx=f.face_center_dx, lane_left=f.lane_left,
                             lane_right=f.lane_right, road_artifact=f.road_artifact, speed=f.speed)
                        for f in trace.frames))


# -- annotations --------------------------------------------------------------


def load_annotations(path) -> list[Annotation]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc.msg})", line=exc.lineno) from exc
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a JSON array of annotations")
    out = []
    for k, obj in enumerate(data):
        _check_fields(obj, ("maneuver", "t_start"), f"{path}: annotation {k}")
        try:
            out.append(Annotation(ManeuverClass(obj["maneuver"]), float(obj["t_start"])))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: annotation {k}: {exc}") from exc
    return out


def save_annotations(annotations: Sequence[Annotation], path):
    rows = [dict(maneuver=a.maneuver.value, t_start=a.t_start) for a in annotations]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")


# -- datasets -----------------------------------------------------------------


def load_dataset(path, dim_x: int = 6, dim_z: int = 9) -> list[FeatureSequence]:
    out = []
    for lineno, obj in _read_jsonl(path):
        _check_fields(obj, DATASET_FIELDS, str(path), lineno)
        try:
            x = np.asarray(obj["x"], dtype=float)
            z = np.asarray(obj["z"], dtype=float)
            label = None if obj["label"] is None else ManeuverClass(obj["label"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: {exc}", line=lineno) from exc
        if x.ndim != 2 or x.shape[1] != dim_x or z.ndim != 2 or z.shape[1] != dim_z or len(x) != len(z) or not len(x):
            raise SchemaError(f"{path}: x must be K x {dim_x} and z K x {dim_z} with K >= 1", line=lineno)
        out.append(FeatureSequence(x=x, z=z, label=label, chunk_duration_s=float(obj["chunk_duration_s"])))
    return out


def save_dataset(dataset: Sequence[FeatureSequence], path):
    _write_lines(path, (dict(label=None if s.label is None else s.label.value,
                             chunk_duration_s=s.chunk_duration_s, x=_floats(s.x), z=_floats(s.z))
                        for s in dataset))


# -- model sets ---------------------------------------------------------------


def model_set_to_json(models: ManeuverModelSet) -> dict:
    params = [models[c] for c in CLASSES]
    counts = {p.n_states for p in params}
    if len(counts) != 1:
        raise SchemaError("all class models must share the same number of states to serialize")
    return dict(
        format_version=FORMAT_VERSION,
        n_states=params[0].n_states, dim_x=params[0].dim_x, dim_z=params[0].dim_z,
        prior=_floats(models.prior),
        models={c.value: dict(
            states=[dict(mu=_floats(s.mu), a=_floats(s.a), b=_floats(s.b),
                         sigma=_floats(s.sigma.reshape(-1)), w_rows=_floats(s.w_rows))
                    for s in p.states],
            w0=_floats(p.w0)) for c, p in zip(CLASSES, params)})


def model_set_from_json(doc: dict, where: str = "model set") -> ManeuverModelSet:
    _check_fields(doc, ("format_version", "n_states", "dim_x", "dim_z", "prior", "models"), where)
    if doc["format_version"] != FORMAT_VERSION:
        raise SchemaError(f"{where}: unsupported format_version {doc['format_version']!r}")
    S, dx, dz = int(doc["n_states"]), int(doc["dim_x"]), int(doc["dim_z"])
    models = {}
    for name, m in doc["models"].items():
        try:
            cls = ManeuverClass(name)
        except ValueError as exc:
            raise SchemaError(f"{where}: unknown class {name!r}") from exc
        _check_fields(m, ("states", "w0"), f"{where}: {name}")
        if len(m["states"]) != S:
            raise SchemaError(f"{where}: {name} has {len(m['states'])} states, expected {S}")
        states = []
        for i, s in enumerate(m["states"]):
            _check_fields(s, ("mu", "a", "b", "sigma", "w_rows"), f"{where}: {name} state {i}")
            shapes = dict(mu=(dz,), a=(dx,), b=(dz,), sigma=(dz * dz,), w_rows=(S, dx + 1))
            arrs = {}
            for key, shape in shapes.items():
                arr = np.asarray(s[key], dtype=float)
                if arr.shape != shape:
                    raise SchemaError(f"{where}: {name} state {i} {key} has shape {arr.shape}, expected {shape}")
                arrs[key] = arr
            arrs["sigma"] = arrs["sigma"].reshape(dz, dz)
            states.append(StateParams(**arrs))
        w0 = np.asarray(m["w0"], dtype=float)
        if w0.shape != (S, dx + 1):
            raise SchemaError(f"{where}: {name} w0 has shape {w0.shape}, expected {(S, dx + 1)}")
        models[cls] = ModelParams(states=tuple(states), w0=w0)
    return ManeuverModelSet(models=models, prior=np.asarray(doc["prior"], dtype=float))


def save_model_set(models: ManeuverModelSet, path):
    Path(path).write_text(json.dumps(model_set_to_json(models), indent=1, allow_nan=False) + "\n",
                          encoding="utf-8")


def load_model_set(path) -> ManeuverModelSet:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc.msg})", line=exc.lineno) from exc
    return model_set_from_json(doc, str(path))


# -- prediction events ---------------------------------------------------------


def save_events(events: Sequence[PredictionEvent], path):
    _write_lines(path, (dict(t=e.t, posteriors=_floats(e.posteriors), predicted=e.predicted.value)
                        for e in events))


def load_events(path) -> list[PredictionEvent]:
    out = []
    for lineno, obj in _read_jsonl(path):
        _check_fields(obj, EVENT_FIELDS, str(path), lineno)
        try:
            p = np.asarray(obj["posteriors"], dtype=float)
            if p.shape != (len(CLASSES),):
                raise ValueError(f"posteriors must have {len(CLASSES)} entries")
            out.append(PredictionEvent(float(obj["t"]), p, ManeuverClass(obj["predicted"])))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: {exc}", line=lineno) from exc
    return out


# -- CSV ----------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None):
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
