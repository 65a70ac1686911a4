"""Planar polyline primitives: sampling, distances, discrepancies, simplification.

Points are ``(N, 2)`` float64 arrays throughout.  Nearest-neighbour queries go
through :class:`PointIndex` / :class:`SegmentIndex`, which use a k-d tree to
pick candidates and then recompute every distance with :func:`numpy.hypot`, so
results are identical to an exhaustive scan.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ClassMismatch, EmptyInput, GeometryError

MIN_VERTEX_SEP = 1e-9


class SemanticClass(enum.Enum):
    PED_CROSSING = "ped_crossing"
    DIVIDER = "divider"
    BOUNDARY = "boundary"

    @classmethod
    def parse(cls, s: str) -> "SemanticClass":
        try:
            return cls(s)
        except ValueError:
            raise ValueError(f"unknown semantic class {s!r}") from None


CLASSES = (SemanticClass.PED_CROSSING, SemanticClass.DIVIDER, SemanticClass.BOUNDARY)


def as_points(pts) -> np.ndarray:
    a = np.asarray(pts, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise GeometryError(f"expected (N, 2) points, got shape {a.shape}")
    return a


def dedupe(pts: np.ndarray, tol: float = MIN_VERTEX_SEP) -> np.ndarray:
    """Drop vertices closer than `tol` to their predecessor."""
    pts = as_points(pts)
    if len(pts) < 2:
        return pts
    keep = [0]
    for i in range(1, len(pts)):
        if math.hypot(*(pts[i] - pts[keep[-1]])) > tol:
            keep.append(i)
    return pts[keep]


@dataclass(frozen=True, eq=False)
class Polyline:
    """Ordered vertex sequence tagged with a semantic class."""

    class_id: SemanticClass
    pts: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.array(self.pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise GeometryError(f"polyline needs >= 2 vertices, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("polyline has non-finite coordinates")
        seps = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seps <= MIN_VERTEX_SEP):
            raise GeometryError("consecutive polyline vertices coincide")
        pts.flags.writeable = False
        object.__setattr__(self, "pts", pts)

    @classmethod
    def cleaned(cls, class_id: SemanticClass, pts) -> "Polyline":
        """Build after removing coincident consecutive vertices."""
        return cls(class_id, dedupe(pts))

    def __len__(self):
        return len(self.pts)

    def __eq__(self, other):
        if not isinstance(other, Polyline):
            return NotImplemented
        return self.class_id == other.class_id and np.array_equal(self.pts, other.pts)

    __hash__ = None

    @property
    def length(self) -> float:
        return arc_length(self)

    @property
    def is_closed(self) -> bool:
        return len(self.pts) > 2 and bool(np.all(self.pts[0] == self.pts[-1]))

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pts[:-1], self.pts[1:]


@dataclass(frozen=True)
class Segment2:
    a: tuple[float, float]
    b: tuple[float, float]
    class_id: SemanticClass

    def __post_init__(self):
        if math.hypot(self.a[0] - self.b[0], self.a[1] - self.b[1]) <= MIN_VERTEX_SEP:
            raise GeometryError("degenerate segment")


def _cumlen(pts: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(pts, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def arc_length(poly) -> float:
    pts = poly.pts if isinstance(poly, Polyline) else as_points(poly)
    if len(pts) < 2:
        return 0.0
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def point_at(pts: np.ndarray, s) -> np.ndarray:
    """Points at arc-length stations `s` (clamped to [0, L])."""
    cum = _cumlen(pts)
    s = np.clip(np.atleast_1d(np.asarray(s, dtype=np.float64)), 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 2)
    seg = cum[idx + 1] - cum[idx]
    t = np.where(seg > 0, (s - cum[idx]) / np.where(seg > 0, seg, 1.0), 0.0)
    return pts[idx] + t[:, None] * (pts[idx + 1] - pts[idx])


def resample(poly, step: float) -> np.ndarray:
    """Sample at arc-length stations 0, step, 2*step, ... plus the final vertex."""
    if step <= 0:
        raise ValueError("resample step must be positive")
    pts = poly.pts if isinstance(poly, Polyline) else as_points(poly)
    L = arc_length(pts)
    n = int(math.floor(L / step + 1e-9))
    s = np.arange(n + 1, dtype=np.float64) * step
    s = s[s < L - 1e-9]
    out = point_at(pts, s)
    return np.vstack([out, pts[-1:]])


def sub_polyline(pts: np.ndarray, s0: float, s1: float) -> np.ndarray:
    """Vertices of the piece between stations s0 < s1, with interpolated ends."""
    cum = _cumlen(pts)
    inner = pts[(cum > s0 + 1e-9) & (cum < s1 - 1e-9)]
    ends = point_at(pts, [s0, s1])
    return dedupe(np.vstack([ends[:1], inner, ends[1:]]))


def project_to_polyline(pts: np.ndarray, q: np.ndarray):
    """Closest-point projection of query points onto a polyline.

    Returns ``(dist, s, seg_idx, t)`` where `s` is the arc-length station of
    the foot point and `t` the clamped parameter on segment `seg_idx`.
    """
    q = np.atleast_2d(q)
    a, b = pts[:-1], pts[1:]
    d, t = _pairwise_seg(q, a, b)
    k = np.argmin(d, axis=1)
    rows = np.arange(len(q))
    cum = _cumlen(pts)
    seglen = cum[1:] - cum[:-1]
    tk = t[rows, k]
    return d[rows, k], cum[k] + tk * seglen[k], k, tk


def _pairwise_seg(q: np.ndarray, a: np.ndarray, b: np.ndarray):
    # (n, m) distances from points q to segments a->b, plus clamped params
    ab = b - a
    denom = (ab * ab).sum(axis=1)
    aq = q[:, None, :] - a[None, :, :]
    t = np.clip((aq * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    foot = a[None] + t[..., None] * ab[None]
    diff = q[:, None, :] - foot
    return np.hypot(diff[..., 0], diff[..., 1]), t


def seg_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Elementwise point-to-closed-segment distance and foot point."""
    ab = b - a
    denom = (ab * ab).sum(axis=-1)
    t = np.clip(((p - a) * ab).sum(axis=-1) / denom, 0.0, 1.0)
    foot = a + t[..., None] * ab
    diff = p - foot
    return np.hypot(diff[..., 0], diff[..., 1]), foot


def point_to_segment_distance(p, s: Segment2) -> float:
    d, _ = seg_distance(np.asarray(p, float), np.asarray(s.a, float), np.asarray(s.b, float))
    return float(d)


class PointIndex:
    """Exact nearest-neighbour lookup into a fixed point set."""

    def __init__(self, pts):
        self.pts = as_points(pts)
        if len(self.pts) == 0:
            raise EmptyInput("empty point set")
        self._tree = cKDTree(self.pts)

    def nearest(self, q, radius: float | None = None):
        """Distances and indices of nearest points; inf / -1 beyond `radius`."""
        q = as_points(q)
        k = min(4, len(self.pts))
        ub = np.inf if radius is None else radius * (1 + 1e-9) + 1e-12
        _, idx = self._tree.query(q, k=k, distance_upper_bound=ub)
        idx = idx.reshape(len(q), k)
        valid = idx < len(self.pts)
        safe = np.where(valid, idx, 0)
        cand = self.pts[safe]
        d = np.hypot(q[:, None, 0] - cand[..., 0], q[:, None, 1] - cand[..., 1])
        d = np.where(valid, d, np.inf)
        j = np.argmin(d, axis=1)
        rows = np.arange(len(q))
        dist = d[rows, j]
        best = np.where(np.isfinite(dist), safe[rows, j], -1)
        if radius is not None:
            out = dist > radius
            dist = np.where(out, np.inf, dist)
            best = np.where(out, -1, best)
        return dist, best


class SegmentIndex:
    """Exact nearest-segment lookup.

    Candidates come from a tree over segment midpoints: the nearest segment
    lies within ``d_v + L_max / 2`` of the query (``d_v`` = distance to the
    nearest segment endpoint), so expanding the candidate list until that
    radius is exhausted makes the result exact.
    """

    def __init__(self, a, b):
        self.a = as_points(a)
        self.b = as_points(b)
        if len(self.a) == 0:
            raise EmptyInput("empty segment set")
        self.mid = 0.5 * (self.a + self.b)
        self.half = 0.5 * float(np.hypot(*(self.b - self.a).T).max())
        self._tree = cKDTree(self.mid)
        self._ends = PointIndex(np.vstack([self.a, self.b]))

    def __len__(self):
        return len(self.a)

    def nearest(self, q, radius: float | None = None):
        """Return (dist, seg_idx, foot) for each query; inf / -1 beyond radius."""
        q = as_points(q)
        n, m = len(q), len(self.a)
        dv, _ = self._ends.nearest(q)
        reach = dv if radius is None else np.minimum(dv, radius)
        reach = reach + self.half + 1e-9
        dist = np.full(n, np.inf)
        best = np.full(n, -1, dtype=np.int64)
        foot = np.full((n, 2), np.nan)
        todo = np.arange(n)
        k = min(8, m)
        while len(todo):
            dm, idx = self._tree.query(q[todo], k=k, distance_upper_bound=reach[todo].max())
            dm = dm.reshape(len(todo), k)
            idx = idx.reshape(len(todo), k)
            valid = (idx < m) & (dm <= reach[todo, None])
            safe = np.where(valid, idx, 0)
            d, f = seg_distance(q[todo, None, :], self.a[safe], self.b[safe])
            d = np.where(valid, d, np.inf)
            j = np.argmin(d, axis=1)
            rows = np.arange(len(todo))
            dist[todo] = d[rows, j]
            best[todo] = np.where(np.isfinite(d[rows, j]), safe[rows, j], -1)
            foot[todo] = f[rows, j]
            # still open if the k-th candidate is inside the reach radius
            open_ = (k < m) & (idx[:, -1] < m) & (dm[:, -1] <= reach[todo])
            todo = todo[open_]
            k = min(k * 4, m)
        if radius is not None:
            out = dist > radius
            dist[out] = np.inf
            best[out] = -1
        return dist, best, foot


def directed_distance(src, dst) -> float:
    """Mean nearest-neighbour distance from each point of `src` into `dst`."""
    src, dst = as_points(src), as_points(dst)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyInput("directed_distance needs non-empty point sets")
    d, _ = PointIndex(dst).nearest(src)
    return float(np.mean(d))


def symmetric_discrepancy(a: Polyline, b: Polyline, step: float) -> float:
    if a.class_id != b.class_id:
        raise ClassMismatch(f"{a.class_id.value} vs {b.class_id.value}")
    sa, sb = resample(a, step), resample(b, step)
    return 0.5 * (directed_distance(sa, sb) + directed_distance(sb, sa))


def simplify(poly: Polyline, tolerance: float) -> Polyline:
    """Douglas-Peucker with closed-segment distances; endpoints kept."""
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    pts = poly.pts
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        inner = pts[i + 1 : j]
        a, b = pts[i], pts[j]
        if np.hypot(*(b - a)) <= MIN_VERTEX_SEP:
            d = np.hypot(*(inner - a).T)
        else:
            d, _ = seg_distance(inner, a, b)
        k = int(np.argmax(d))
        if d[k] > tolerance:
            keep[i + 1 + k] = True
            stack.append((i, i + 1 + k))
            stack.append((i + 1 + k, j))
    return Polyline(poly.class_id, pts[keep])


def end_tangent(pts: np.ndarray, at_end: bool, span: float = 1.0) -> np.ndarray:
    """Unit outward direction at one end, over min(span, L/2) of arc length."""
    L = arc_length(pts)
    s = min(span, 0.5 * L)
    if at_end:
        p0, p1 = point_at(pts, [L - s, L])
    else:
        p0, p1 = point_at(pts, [s, 0.0])
    v = p1 - p0
    return v / np.hypot(*v)
