"""Incremental construction of the global vector map from per-frame polylines."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMerge
from .geom import (
    CLASSES,
    PointIndex,
    Polyline,
    SegmentIndex,
    SemanticClass,
    arc_length,
    dedupe,
    end_tangent,
    resample,
    simplify,
    symmetric_discrepancy,
)
from .map_model import FrameObservation, FramePolyline, GlobalPolyline, GlobalVectorMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionConfig:
    resample_step: float = 0.2
    assoc_threshold: float = 1.0
    dup_tolerance: float = 0.15
    snap_dist: float = 0.5
    snap_angle: float = 15.0  # degrees
    min_fragment_len: float = 1.0
    simplify_tol: float = 0.05
    local_averaging: bool = False

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "local_averaging" and not v > 0:
                raise ValueError(f"FusionConfig.{k} must be positive, got {v}")
        if not 0 < self.snap_angle < 90:
            raise ValueError("snap_angle must lie in (0, 90) degrees")

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class AssociationResult:
    """Per frame polyline: matched global id (or None) and the match cost."""

    matches: list[Optional[int]] = field(default_factory=list)
    costs: list[Optional[float]] = field(default_factory=list)
    by_id: list[bool] = field(default_factory=list)


def transform_frame(obs: FrameObservation) -> list[FramePolyline]:
    T = obs.ego_pose_ref
    return [FramePolyline(Polyline(fp.class_id, T.apply(fp.geometry.pts)), fp.persistent_id)
            for fp in obs.polylines]


def _bbox_gap(a: np.ndarray, b: np.ndarray) -> float:
    lo = np.maximum(a.min(0), b.min(0))
    hi = np.minimum(a.max(0), b.max(0))
    gap = np.maximum(lo - hi, 0.0)
    return float(np.hypot(*gap))


def associate(frame_polys: list[FramePolyline], gmap: GlobalVectorMap,
              cfg: FusionConfig) -> AssociationResult:
    """ID association first, then greedy one-to-one geometric matching per class."""
    n = len(frame_polys)
    res = AssociationResult([None] * n, [None] * n, [False] * n)
    for c in CLASSES:
        elems = gmap.of(c)
        id_owner = {sid: g.global_id for g in elems for sid in g.source_ids}
        rows = [i for i, fp in enumerate(frame_polys) if fp.class_id == c]
        taken = set()
        free_rows = []
        for i in rows:
            pid = frame_polys[i].persistent_id
            if pid is not None and pid in id_owner:
                gid = id_owner[pid]
                g = next(e for e in elems if e.global_id == gid)
                res.matches[i] = gid
                res.costs[i] = symmetric_discrepancy(frame_polys[i].geometry, g.geometry,
                                                     cfg.resample_step)
                res.by_id[i] = True
                taken.add(gid)
            else:
                free_rows.append(i)
        # geometric fallback; discrepancy >= bbox gap, so the prune is exact
        pairs = []
        for i in free_rows:
            gi = frame_polys[i].geometry
            for g in elems:
                if g.global_id in taken:
                    continue
                if _bbox_gap(gi.pts, g.geometry.pts) >= cfg.assoc_threshold:
                    continue
                cost = symmetric_discrepancy(gi, g.geometry, cfg.resample_step)
                if cost < cfg.assoc_threshold:
                    pairs.append((cost, g.global_id, i))
        pairs.sort()
        used_rows = set()
        for cost, gid, i in pairs:
            if i in used_rows or gid in taken:
                continue
            res.matches[i] = gid
            res.costs[i] = cost
            used_rows.add(i)
            taken.add(gid)
    return res


def _stations(geom: Polyline, q: np.ndarray) -> np.ndarray:
    """Arc-length stations of points projected onto `geom`; overhangs signed."""
    pts = geom.pts
    a, b = pts[:-1], pts[1:]
    _, k, foot = SegmentIndex(a, b).nearest(q)
    seglen = np.hypot(*(b - a).T)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    s = cum[k] + np.hypot(*(foot - a[k]).T)
    L = cum[-1]
    at_start = (k == 0) & np.all(foot == a[0], axis=1)
    at_end = (k == len(a) - 1) & np.all(foot == b[-1], axis=1)
    if at_start.any():
        out0 = end_tangent(pts, at_end=False)
        s[at_start] = -((q[at_start] - pts[0]) @ out0)
    if at_end.any():
        out1 = end_tangent(pts, at_end=True)
        s[at_end] = L + (q[at_end] - pts[-1]) @ out1
    return s


def merge_into(elem: GlobalPolyline, new_poly: Polyline, cfg: FusionConfig,
               frame_index: Optional[int] = None,
               source_id: Optional[int] = None) -> GlobalPolyline:
    """Fold the samples of `new_poly` into `elem`, dropping near-duplicates."""
    support = elem.support_frames | ({frame_index} if frame_index is not None else set())
    sources = elem.source_ids | ({source_id} if source_id is not None else set())
    old = resample(elem.geometry, cfg.resample_step)
    new = resample(new_poly, cfg.resample_step)
    d, _ = PointIndex(old).nearest(new)
    fresh = new[d > cfg.dup_tolerance]
    if len(fresh) == 0:
        return GlobalPolyline(elem.global_id, elem.geometry, frozenset(support), frozenset(sources))
    combined = np.vstack([old, fresh])
    if cfg.local_averaging:
        pool = np.vstack([old, new])
        tree = cKDTree(pool)
        nbrs = tree.query_ball_point(combined, cfg.dup_tolerance)
        combined = np.array([pool[ix].mean(axis=0) if ix else p for p, ix in zip(combined, nbrs)])
    s = _stations(elem.geometry, combined)
    order = np.argsort(s, kind="stable")
    pts = dedupe(combined[order])
    if len(pts) < 2:
        raise DegenerateMerge(f"merge of element {elem.global_id} collapsed to {len(pts)} vertex")
    return GlobalPolyline(elem.global_id, Polyline(elem.class_id, pts),
                          frozenset(support), frozenset(sources))


def suppress_fragments(gmap: GlobalVectorMap, cfg: FusionConfig) -> GlobalVectorMap:
    out = gmap.copy()
    for c in CLASSES:
        out.elements[c] = [g for g in out.elements[c]
                           if not (arc_length(g.geometry) < cfg.min_fragment_len
                                   and len(g.support_frames) == 1)]
    return out


def _join(a: np.ndarray, b: np.ndarray, end_a: bool, end_b: bool) -> np.ndarray:
    if end_a and not end_b:
        return np.vstack([a, b])
    if end_a and end_b:
        return np.vstack([a, b[::-1]])
    if not end_a and end_b:
        return np.vstack([b, a])
    return np.vstack([b[::-1], a])


def _snap_candidates(elems: list[GlobalPolyline], cfg: FusionConfig):
    cos_tol = math.cos(math.radians(cfg.snap_angle))
    info = []
    for g in elems:
        if g.geometry.is_closed:
            continue
        pts = g.geometry.pts
        for at_end in (False, True):
            info.append((g, at_end, pts[-1] if at_end else pts[0], end_tangent(pts, at_end)))
    cands = []
    for i in range(len(info)):
        gi, ei, pi, ti = info[i]
        for j in range(i + 1, len(info)):
            gj, ej, pj, tj = info[j]
            if gi.global_id == gj.global_id:
                continue
            d = math.hypot(*(pi - pj))
            if d > cfg.snap_dist:
                continue
            # outward tangents should point at each other: angle to 180 deg within tol
            if -float(ti @ tj) < cos_tol:
                continue
            lo, hi = sorted((gi.global_id, gj.global_id))
            cands.append((d, lo, hi, gi, ei, gj, ej))
    cands.sort(key=lambda r: r[:3])
    return cands


def snap_endpoints(gmap: GlobalVectorMap, cfg: FusionConfig) -> GlobalVectorMap:
    """Join same-class elements whose facing endpoints are close and collinear."""
    out = gmap.copy()
    for c in CLASSES:
        elems = list(out.elements[c])
        while True:
            cands = _snap_candidates(elems, cfg)
            if not cands:
                break
            _, _, _, gi, ei, gj, ej = cands[0]
            keep, drop, ek, ed = (gi, gj, ei, ej) if gi.global_id < gj.global_id else (gj, gi, ej, ei)
            pts = dedupe(_join(keep.geometry.pts, drop.geometry.pts, ek, ed))
            joined = GlobalPolyline(keep.global_id, Polyline(c, pts),
                                    keep.support_frames | drop.support_frames,
                                    keep.source_ids | drop.source_ids)
            log.debug("snap %s: %d <- %d", c.value, keep.global_id, drop.global_id)
            elems = [joined if g.global_id == keep.global_id else g
                     for g in elems if g.global_id != drop.global_id]
        out.elements[c] = elems
    return out


def densify(pts: np.ndarray, step: float) -> np.ndarray:
    """Near-uniform resampling that keeps every original vertex."""
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, math.ceil(math.hypot(*(b - a)) / step - 1e-9))
        t = np.arange(1, n + 1)[:, None] / n
        seg = a + t * (b - a)
        seg[-1] = b
        out.append(seg)
    return np.vstack(out)


def finalize_polyline(poly: Polyline, cfg: FusionConfig) -> Polyline:
    return simplify(Polyline(poly.class_id, densify(poly.pts, cfg.resample_step)), cfg.simplify_tol)


def finalize(gmap: GlobalVectorMap, cfg: FusionConfig) -> GlobalVectorMap:
    out = gmap.copy()
    for c in CLASSES:
        out.elements[c] = [GlobalPolyline(g.global_id, finalize_polyline(g.geometry, cfg),
                                          g.support_frames, g.source_ids)
                           for g in out.elements[c]]
    return out


class MapBuilder:
    """Single-writer incremental map state for one scene."""

    def __init__(self, cfg: FusionConfig = FusionConfig(), scene: str = ""):
        self.cfg = cfg
        self.map = GlobalVectorMap(config=asdict(cfg), scene=scene)
        self._next_gid = {c: 0 for c in CLASSES}

    def _new_element(self, fp: FramePolyline, t: int) -> GlobalPolyline:
        c = fp.class_id
        g = GlobalPolyline(self._next_gid[c], fp.geometry, frozenset({t}),
                           frozenset() if fp.persistent_id is None else frozenset({fp.persistent_id}))
        self._next_gid[c] += 1
        self.map.elements[c].append(g)
        return g

    def add_frame(self, obs: FrameObservation) -> AssociationResult:
        t = obs.frame_index
        polys = transform_frame(obs)
        assoc = associate(polys, self.map, self.cfg)
        for i, fp in enumerate(polys):
            c = fp.class_id
            gid = assoc.matches[i]
            if gid is None and fp.persistent_id is not None:
                # a second piece of an element first seen earlier in this frame
                gid = next((g.global_id for g in self.map.of(c) if fp.persistent_id in g.source_ids), None)
            if gid is None:
                self._new_element(fp, t)
                continue
            elems = self.map.elements[c]
            k = next(k for k, g in enumerate(elems) if g.global_id == gid)
            elems[k] = merge_into(elems[k], fp.geometry, self.cfg, t, fp.persistent_id)
        self.map = snap_endpoints(suppress_fragments(self.map, self.cfg), self.cfg)
        return assoc

    def result(self) -> GlobalVectorMap:
        return finalize(snap_endpoints(suppress_fragments(self.map, self.cfg), self.cfg), self.cfg)


def build_map(frames, cfg: FusionConfig = FusionConfig(), scene: str = "") -> GlobalVectorMap:
    b = MapBuilder(cfg, scene)
    for obs in frames:
        b.add_frame(obs)
    return b.result()
