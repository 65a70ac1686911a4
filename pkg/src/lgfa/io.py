"""JSON interchange for frames, maps, object boxes and augmented frames.

Floats are written with Python's shortest round-trip ``repr`` so a write/read
cycle is bit-exact.  All readers raise :class:`SchemaError` or
:class:`GeometryError` with the file, frame and element position in the
message.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

from .errors import GeometryError, SchemaError
from .geom import CLASSES, Polyline, SemanticClass
from .map_model import (
    FrameObservation,
    FramePolyline,
    GlobalPolyline,
    GlobalVectorMap,
    ObjectBox,
    Pose2D,
)


def dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n"


def _write(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def _load(path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from None


class _Ctx:
    """Location string builder for error messages."""

    def __init__(self, path):
        self.path = str(path)

    def __call__(self, frame=None, element=None) -> str:
        loc = self.path
        if frame is not None:
            loc += f", frame {frame}"
        if element is not None:
            loc += f", element {element}"
        return loc


def _req(d: dict, key: str, types, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, types):
        raise SchemaError(f"{where}: field {key!r} has wrong type {type(v).__name__}")
    return v


def _class(s, where: str) -> SemanticClass:
    if not isinstance(s, str):
        raise SchemaError(f"{where}: class must be a string")
    try:
        return SemanticClass(s)
    except ValueError:
        raise SchemaError(f"{where}: unknown class {s!r}") from None


def _points(raw, where: str) -> list:
    if not isinstance(raw, list):
        raise SchemaError(f"{where}: 'pts' must be a list")
    out = []
    for k, p in enumerate(raw):
        if (not isinstance(p, list) or len(p) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)):
            raise SchemaError(f"{where}: vertex {k} is not an [x, y] number pair")
        if not all(math.isfinite(v) for v in p):
            raise GeometryError(f"{where}: vertex {k} is not finite")
        out.append([float(p[0]), float(p[1])])
    if len(out) < 2:
        raise GeometryError(f"{where}: polyline has {len(out)} vertices, need >= 2")
    return out


def _polyline(c, pts, where) -> Polyline:
    try:
        return Polyline(c, pts)
    except GeometryError as e:
        raise GeometryError(f"{where}: {e}") from None


def _pose(raw, where) -> Pose2D:
    if (not isinstance(raw, list) or len(raw) != 3
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw)):
        raise SchemaError(f"{where}: pose must be [tx, ty, phi]")
    try:
        return Pose2D(*raw)
    except GeometryError as e:
        raise GeometryError(f"{where}: {e}") from None


def pts_list(poly: Polyline) -> list:
    return [[float(x), float(y)] for x, y in poly.pts]


# frames -------------------------------------------------------------------

def frames_to_obj(frames, scene: str = "") -> dict:
    return {
        "scene": scene,
        "frames": [
            {
                "t": f.frame_index,
                "ego_pose": f.ego_pose_ref.as_list(),
                "polylines": [
                    {"class": fp.class_id.value, "id": fp.persistent_id, "pts": pts_list(fp.geometry)}
                    for fp in f.polylines
                ],
            }
            for f in frames
        ],
    }


def frames_from_obj(obj, path="<memory>") -> list[FrameObservation]:
    ctx = _Ctx(path)
    _req(obj, "scene", str, ctx())
    raw_frames = _req(obj, "frames", list, ctx())
    frames = []
    last_t = -1
    for fi, fr in enumerate(raw_frames):
        t = _req(fr, "t", int, ctx(fi))
        if t < 0 or t <= last_t:
            raise SchemaError(f"{ctx(fi)}: frame index {t} not increasing / non-negative")
        last_t = t
        pose = _pose(_req(fr, "ego_pose", list, ctx(fi)), ctx(fi))
        polys = []
        for ei, el in enumerate(_req(fr, "polylines", list, ctx(fi))):
            where = ctx(fi, ei)
            c = _class(_req(el, "class", str, where), where)
            if "id" not in el:
                raise SchemaError(f"{where}: missing field 'id'")
            pid = el["id"]
            if pid is not None and (isinstance(pid, bool) or not isinstance(pid, int) or pid < 0):
                raise SchemaError(f"{where}: 'id' must be a non-negative int or null")
            pts = _points(_req(el, "pts", list, where), where)
            polys.append(FramePolyline(_polyline(c, pts, where), pid))
        frames.append(FrameObservation(t, pose, tuple(polys)))
    return frames


def write_frames(path, frames, scene: str = "") -> None:
    _write(path, frames_to_obj(frames, scene))


def read_frames(path) -> list[FrameObservation]:
    return frames_from_obj(_load(path), path)


def read_scene_name(path) -> str:
    obj = _load(path)
    return obj.get("scene", "") if isinstance(obj, dict) else ""


# maps ---------------------------------------------------------------------

def map_to_obj(m: GlobalVectorMap) -> dict:
    return {
        "scene": m.scene,
        "config": m.config,
        "elements": [
            {
                "class": g.class_id.value,
                "gid": g.global_id,
                "pts": pts_list(g.geometry),
                "frames": sorted(g.support_frames),
                "ids": sorted(g.source_ids),
            }
            for g in m.all()
        ],
    }


def map_from_obj(obj, path="<memory>") -> GlobalVectorMap:
    ctx = _Ctx(path)
    scene = _req(obj, "scene", str, ctx())
    config = _req(obj, "config", dict, ctx())
    m = GlobalVectorMap(config=config, scene=scene)
    seen = {c: set() for c in CLASSES}
    for ei, el in enumerate(_req(obj, "elements", list, ctx())):
        where = ctx(element=ei)
        c = _class(_req(el, "class", str, where), where)
        gid = _req(el, "gid", int, where)
        if gid in seen[c]:
            raise SchemaError(f"{where}: duplicate gid {gid} in class {c.value}")
        seen[c].add(gid)
        pts = _points(_req(el, "pts", list, where), where)
        frames = _req(el, "frames", list, where)
        ids = el.get("ids", [])
        for v in list(frames) + list(ids):
            if isinstance(v, bool) or not isinstance(v, int):
                raise SchemaError(f"{where}: 'frames'/'ids' must hold integers")
        m.elements[c].append(
            GlobalPolyline(gid, _polyline(c, pts, where), frozenset(frames), frozenset(ids))
        )
    return m


def write_map(path, m: GlobalVectorMap) -> None:
    _write(path, map_to_obj(m))


def read_map(path) -> GlobalVectorMap:
    return map_from_obj(_load(path), path)


# objects ------------------------------------------------------------------

def box_to_obj(b: ObjectBox) -> dict:
    return {"cx": b.cx, "cy": b.cy, "yaw": b.yaw, "l": b.length, "w": b.width, "label": b.label}


def box_from_obj(d, where) -> ObjectBox:
    vals = [_req(d, k, (int, float), where) for k in ("cx", "cy", "yaw", "l", "w")]
    label = _req(d, "label", str, where)
    try:
        return ObjectBox(*map(float, vals), label)
    except GeometryError as e:
        raise GeometryError(f"{where}: {e}") from None


def read_objects(path) -> dict[int, list[ObjectBox]]:
    """Objects file: a single ``{"t", "boxes"}`` record or a list of them."""
    ctx = _Ctx(path)
    obj = _load(path)
    records = obj if isinstance(obj, list) else [obj]
    out: dict[int, list[ObjectBox]] = {}
    for fi, rec in enumerate(records):
        t = _req(rec, "t", int, ctx(fi))
        out[t] = [box_from_obj(b, ctx(fi, bi))
                  for bi, b in enumerate(_req(rec, "boxes", list, ctx(fi)))]
    return out


def write_objects(path, objects: dict[int, list[ObjectBox]]) -> None:
    _write(path, [{"t": t, "boxes": [box_to_obj(b) for b in boxes]}
                  for t, boxes in sorted(objects.items())])


# completed maps and augmented frames ---------------------------------------

def completed_elements(cm, frame_index: int) -> list[dict]:
    """Map-schema elements for one frame's completion output, with per-run sources."""
    return [
        {
            "class": p.class_id.value,
            "gid": p.global_id,
            "pts": [[float(x), float(y)] for x, y in p.pts],
            "frames": [frame_index],
            "ids": [],
            "runs": [{"src": s, "pts": [[float(x), float(y)] for x, y in r]} for s, r in p.runs()],
        }
        for p in cm.items
    ]


def completed_to_obj(per_frame: dict, scene: str = "", config: dict | None = None) -> dict:
    """per_frame: frame index -> CompletedMap."""
    elements = []
    for t in sorted(per_frame):
        elements.extend(completed_elements(per_frame[t], t))
    return {"scene": scene, "config": config or {}, "elements": elements}


def completed_from_obj(obj, path="<memory>") -> dict:
    """Inverse of :func:`completed_to_obj`: frame index -> CompletedMap."""
    from .completion import SOURCES, CompletedMap, CompletedPolyline

    ctx = _Ctx(path)
    out: dict = {}
    for ei, el in enumerate(_req(obj, "elements", list, ctx())):
        where = ctx(element=ei)
        c = _class(_req(el, "class", str, where), where)
        frames = _req(el, "frames", list, where)
        if len(frames) != 1 or not isinstance(frames[0], int):
            raise SchemaError(f"{where}: completed element needs exactly one frame index")
        pts, src = [], []
        for ri, run in enumerate(_req(el, "runs", list, where)):
            s = _req(run, "src", str, where)
            if s not in SOURCES:
                raise SchemaError(f"{where}, run {ri}: unknown src {s!r}")
            rp = _points(_req(run, "pts", list, where), where)
            if pts and rp[0] != pts[-1]:
                raise SchemaError(f"{where}, run {ri}: runs must share their junction vertex")
            pts.extend(rp if not pts else rp[1:])
            src.extend([s] * (len(rp) - 1))
        geom = _polyline(c, pts, where)
        gid = el.get("gid")
        out.setdefault(frames[0], CompletedMap()).items.append(
            CompletedPolyline(c, gid, geom.pts, tuple(src)))
    return out


def write_completed(path, per_frame: dict, scene: str = "", config: dict | None = None) -> None:
    _write(path, completed_to_obj(per_frame, scene, config))


def read_completed(path) -> dict:
    return completed_from_obj(_load(path), path)


def augmented_to_obj(frames: list, scene: str = "") -> dict:
    return {
        "scene": scene,
        "frames": [
            {
                "t": a.frame_index,
                "refined_pose": a.refined_pose.as_list(),
                "ego_in_map": a.ego_in_map.as_list(),
                "objects_in_map": [box_to_obj(b) for b in a.objects_in_map],
                "completed_map": completed_elements(_as_completed(a.completed_map), a.frame_index),
            }
            for a in frames
        ],
    }


def _as_completed(cm):
    from .completion import CompletedMap

    return cm if isinstance(cm, CompletedMap) else CompletedMap(list(cm))


def write_augmented(path, frames: list, scene: str = "") -> None:
    _write(path, augmented_to_obj(frames, scene))


# pose tables ----------------------------------------------------------------

POSE_COLUMNS = ("frame", "stage1_iters", "stage2_iters", "tx", "ty", "phi_deg", "trans_err_m", "head_err_deg")


def read_poses(path) -> dict[int, Pose2D]:
    """Frame index -> refined pose from a `localize` CSV."""
    import csv

    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        missing = {"frame", "tx", "ty", "phi_deg"} - set(rd.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        for i, row in enumerate(rd):
            try:
                t = int(row["frame"])
                out[t] = Pose2D(float(row["tx"]), float(row["ty"]), math.radians(float(row["phi_deg"])))
            except (TypeError, ValueError) as e:
                raise SchemaError(f"{path}, row {i + 2}: {e}") from None
    return out
