"""Coverage of global elements by aligned frame polylines, and gap completion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .geom import (
    CLASSES,
    Polyline,
    SegmentIndex,
    SemanticClass,
    arc_length,
    dedupe,
    end_tangent,
    project_to_polyline,
    resample,
    sub_polyline,
)
from .map_model import FrameObservation, GlobalPolyline, GlobalVectorMap, Pose2D

SOURCES = ("obs", "bridge", "splice")
_JOIN_TOL = 1e-9


@dataclass(frozen=True)
class CoverageInterval:
    global_id: int
    start_s: float
    end_s: float
    covered: bool

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class CompletionConfig:
    buffer: float = 0.75
    eta: float = 2.0
    tangent_tol: float = 20.0  # degrees
    delta: float = 0.2

    def __post_init__(self):
        for k in ("buffer", "eta", "tangent_tol", "delta"):
            if not getattr(self, k) > 0:
                raise ValueError(f"CompletionConfig.{k} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class CompletedPolyline:
    """One stitched output polyline; `seg_src[i]` tags the segment pts[i] -> pts[i+1]."""

    class_id: SemanticClass
    global_id: Optional[int]
    pts: np.ndarray
    seg_src: tuple[str, ...]

    def __post_init__(self):
        if len(self.seg_src) != len(self.pts) - 1:
            raise ValueError("seg_src needs one tag per segment")

    @property
    def geometry(self) -> Polyline:
        return Polyline(self.class_id, self.pts)

    def runs(self) -> list[tuple[str, np.ndarray]]:
        """Maximal same-source vertex runs; neighbouring runs share a vertex."""
        out, start = [], 0
        for i in range(1, len(self.seg_src) + 1):
            if i == len(self.seg_src) or self.seg_src[i] != self.seg_src[start]:
                out.append((self.seg_src[start], self.pts[start:i + 1]))
                start = i
        return out


@dataclass
class CompletedMap:
    items: list[CompletedPolyline] = field(default_factory=list)

    def of(self, c: SemanticClass) -> list[CompletedPolyline]:
        return [p for p in self.items if p.class_id == c]

    def polylines(self, c: SemanticClass) -> list[Polyline]:
        return [p.geometry for p in self.of(c)]


# coverage --------------------------------------------------------------------

def _segments(polys: Iterable) -> Optional[SegmentIndex]:
    a, b = [], []
    for p in polys:
        pts = p.pts if hasattr(p, "pts") else np.asarray(p, dtype=np.float64)
        a.append(pts[:-1])
        b.append(pts[1:])
    if not a:
        return None
    return SegmentIndex(np.vstack(a), np.vstack(b))


def _stations_of_samples(pts: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    samples = resample(pts, delta)
    L = arc_length(pts)
    s = np.minimum(np.arange(len(samples), dtype=np.float64) * delta, L)
    s[-1] = L
    return samples, s


def _intervals(gid: int, s: np.ndarray, flags: np.ndarray, L: float) -> list[CoverageInterval]:
    flip = np.nonzero(flags[1:] != flags[:-1])[0]
    cuts = [0.0] + [0.5 * (s[i] + s[i + 1]) for i in flip] + [L]
    starts = [0] + [i + 1 for i in flip]
    return [CoverageInterval(gid, float(cuts[k]), float(cuts[k + 1]), bool(flags[starts[k]]))
            for k in range(len(starts))]


def coverage_of(gid: int, pts: np.ndarray, segs: Optional[SegmentIndex],
                cfg: CompletionConfig) -> list[CoverageInterval]:
    samples, s = _stations_of_samples(pts, cfg.delta)
    if segs is None:
        flags = np.zeros(len(samples), dtype=bool)
    else:
        d, _, _ = segs.nearest(samples, radius=cfg.buffer)
        flags = d <= cfg.buffer
    return _intervals(gid, s, flags, arc_length(pts))


def coverage(global_elem: GlobalPolyline, aligned_frame_polys, cfg: CompletionConfig = CompletionConfig()
             ) -> list[CoverageInterval]:
    """Partition of [0, L] of the element into covered / uncovered intervals."""
    same = [p for p in aligned_frame_polys if p.class_id == global_elem.class_id]
    return coverage_of(global_elem.global_id, global_elem.geometry.pts, _segments(same), cfg)


# completion -------------------------------------------------------------------

@dataclass
class _Piece:
    pts: np.ndarray  # oriented along increasing element station
    s0: float
    s1: float
    src: str


def _orient(elem_pts: np.ndarray, pts: np.ndarray) -> _Piece:
    _, s, _, _ = project_to_polyline(elem_pts, pts[[0, -1]])
    if s[0] > s[1]:
        return _Piece(pts[::-1].copy(), float(s[1]), float(s[0]), "obs")
    return _Piece(pts, float(s[0]), float(s[1]), "obs")


def _assign(polys: list[Polyline], elems: list[GlobalPolyline], cfg: CompletionConfig):
    """Owner element (index) of each frame polyline: the one it hugs most, or None."""
    owners = []
    idx = [SegmentIndex(*g.geometry.segments()) for g in elems]
    for p in polys:
        samples = resample(p, cfg.delta)
        best, best_n = None, 0
        for k, sx in enumerate(idx):
            d, _, _ = sx.nearest(samples, radius=cfg.buffer)
            n = int(np.count_nonzero(d <= cfg.buffer))
            if n > best_n:
                best, best_n = k, n
        owners.append(best)
    return owners


def _angle_ok(u: np.ndarray, v: np.ndarray, tol_deg: float) -> bool:
    return float(np.clip(u @ v, -1.0, 1.0)) >= math.cos(math.radians(tol_deg))


def _splice(elem_pts: np.ndarray, s0: float, s1: float, left: Optional[_Piece],
            right: Optional[_Piece], cfg: CompletionConfig) -> np.ndarray:
    """Element sub-polyline over [s0, s1], ends moved onto adjacent frame ends when continuous."""
    raw = sub_polyline(elem_pts, s0, s1)
    if len(raw) < 2:
        return raw
    pts = raw.copy()
    if left is not None:
        end = left.pts[-1]
        if math.hypot(*(end - raw[0])) <= cfg.buffer and \
                _angle_ok(end_tangent(left.pts, True), -end_tangent(raw, False), cfg.tangent_tol):
            pts[0] = end
    if right is not None:
        start = right.pts[0]
        if math.hypot(*(start - raw[-1])) <= cfg.buffer and \
                _angle_ok(-end_tangent(right.pts, False), end_tangent(raw, True), cfg.tangent_tol):
            pts[-1] = start
    return dedupe(pts)


def _gaps(pieces: list[_Piece], L: float):
    """Uncovered station intervals of [0, L] with the frame pieces bordering them."""
    order = sorted(pieces, key=lambda p: (p.s0, p.s1))
    gaps, left, reach = [], None, 0.0
    for p in order:
        if p.s0 > reach + _JOIN_TOL:
            gaps.append((reach, p.s0, left, p))
        if left is None or p.s1 > reach:
            left, reach = p, max(reach, p.s1)
    if reach < L - _JOIN_TOL:
        gaps.append((reach, L, left, None))
    return gaps


def _fill_element(g: GlobalPolyline, pieces: list[_Piece], cfg: CompletionConfig) -> list[_Piece]:
    # Gaps come from the projected extents of the frame pieces: buffered sample
    # coverage would swallow every gap shorter than twice the buffer.
    elem_pts = g.geometry.pts
    out = list(pieces)
    for s0, s1, left, right in _gaps(pieces, arc_length(elem_pts)):
        if (left is None or right is None) and s1 - s0 < cfg.delta:
            continue  # end slivers below sample spacing; buffer coverage absorbs them
        if left is not None and right is not None and s1 - s0 < cfg.eta:
            a, b = left.pts[-1], right.pts[0]
            if math.hypot(*(b - a)) > _JOIN_TOL:
                out.append(_Piece(np.vstack([a, b]), s0, s1, "bridge"))
            continue
        sp = _splice(elem_pts, s0, s1, left, right, cfg)
        if len(sp) >= 2:
            out.append(_Piece(sp, s0, s1, "splice"))
    return out


def _stitch(c: SemanticClass, gid: Optional[int], pieces: list[_Piece]) -> list[CompletedPolyline]:
    """Chain pieces whose end meets the next start exactly into maximal polylines."""
    pieces = sorted(pieces, key=lambda p: (p.s0, p.s1, SOURCES.index(p.src)))
    chains: list[tuple[list[np.ndarray], list[str]]] = []
    for p in pieces:
        tags = [p.src] * (len(p.pts) - 1)
        for pts, src in chains:
            if math.hypot(*(pts[-1] - p.pts[0])) <= _JOIN_TOL:
                pts.extend(p.pts[1:])
                src.extend(tags)
                break
        else:
            chains.append((list(p.pts), tags))
    out = []
    for pts, src in chains:
        out.append(CompletedPolyline(c, gid, np.array(pts), tuple(src)))
    return out


def _whole(c, gid, pts, src) -> CompletedPolyline:
    return CompletedPolyline(c, gid, np.asarray(pts), tuple([src] * (len(pts) - 1)))


def aligned_polylines(frame: FrameObservation, theta: Pose2D) -> list[Polyline]:
    return [Polyline(fp.class_id, theta.apply(fp.geometry.pts)) for fp in frame.polylines]


def complete(gmap: GlobalVectorMap, frame: FrameObservation, theta: Pose2D,
             cfg: CompletionConfig = CompletionConfig()) -> CompletedMap:
    aligned = aligned_polylines(frame, theta)
    out = CompletedMap()
    for c in CLASSES:
        polys = [p for p in aligned if p.class_id == c]
        elems = gmap.of(c)
        owners = _assign(polys, elems, cfg) if elems else [None] * len(polys)
        for p, k in zip(polys, owners):
            if k is None:
                out.items.append(_whole(c, None, p.pts, "obs"))
        for k, g in enumerate(elems):
            own = [_orient(g.geometry.pts, p.pts) for p, o in zip(polys, owners) if o == k]
            if not own:
                out.items.append(_whole(c, g.global_id, g.geometry.pts, "splice"))
                continue
            out.items.extend(_stitch(c, g.global_id, _fill_element(g, own, cfg)))
    return out


def pose_only(frame: FrameObservation, theta: Pose2D) -> CompletedMap:
    """Aligned frame polylines with no completion (the baseline output)."""
    return CompletedMap([_whole(p.class_id, None, p.pts, "obs") for p in aligned_polylines(frame, theta)])


# completion rate -------------------------------------------------------------

def _class_polys(vs, c: SemanticClass) -> list[np.ndarray]:
    if isinstance(vs, (CompletedMap, GlobalVectorMap)):
        return [p.pts for p in vs.polylines(c)]
    return [p.pts for p in vs if p.class_id == c]


def completion_rate(output, reference, cfg: CompletionConfig = CompletionConfig()
                    ) -> dict[SemanticClass, float]:
    """Covered share of reference arc length per class, in percent.

    Classes with no reference geometry are omitted.
    """
    rates = {}
    for c in CLASSES:
        refs = _class_polys(reference, c)
        total = sum(arc_length(r) for r in refs)
        if total <= 0:
            continue
        segs = _segments(_class_polys(output, c))
        covered = 0.0
        for r in refs:
            covered += sum(iv.length for iv in coverage_of(-1, r, segs, cfg) if iv.covered)
        rates[c] = 100.0 * (covered / total)
    return rates
