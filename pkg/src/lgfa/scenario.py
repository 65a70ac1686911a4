"""Synthetic road scenes, simulated per-frame observations and pose perturbations."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import SpecError
from .geom import Polyline, SemanticClass, arc_length, dedupe, point_at, sub_polyline
from .map_model import FrameObservation, FramePolyline, GlobalPolyline, GlobalVectorMap, Pose2D
from .rng import Xoshiro256

TEMPLATES = ("straight", "curve", "intersection")


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    template: str = "straight"
    radius: float = 50.0  # curve template only
    length: float = 100.0
    lane_count: int = 2
    lane_width: float = 3.5
    crossings: tuple[float, ...] = (30.0, 70.0)
    crossing_length: Optional[float] = None  # None: span the carriageway
    frame_count: int = 21
    frame_spacing: float = 5.0
    fov_range: float = 30.0
    obs_noise: float = 0.0
    dropout_rate: float = 0.0
    fragment_rate: float = 0.0
    vertex_spacing: float = 1.0
    wander: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "crossings", tuple(float(s) for s in self.crossings))
        if self.template not in TEMPLATES:
            raise SpecError(f"unknown template {self.template!r}")
        for name in ("dropout_rate", "fragment_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {v}")
        for name in ("length", "lane_width", "frame_spacing", "fov_range", "vertex_spacing", "radius"):
            if not getattr(self, name) > 0:
                raise SpecError(f"{name} must be positive")
        if self.lane_count < 1 or self.frame_count < 0:
            raise SpecError("lane_count >= 1 and frame_count >= 0 required")
        if self.obs_noise < 0 or self.wander < 0:
            raise SpecError("obs_noise and wander must be non-negative")

    @property
    def road_width(self) -> float:
        return self.lane_count * self.lane_width

    def replace(self, **kw) -> "ScenarioSpec":
        d = asdict(self)
        d.update(kw)
        return ScenarioSpec(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown scenario fields {sorted(unknown)}")
        return cls(**d)


DEFAULT_SPEC = ScenarioSpec()


# centerline ---------------------------------------------------------------

def centerline(spec: ScenarioSpec, s):
    """Points, unit tangents and left normals of the ego road at stations `s`."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if spec.template == "curve":
        R = spec.radius
        th = s / R
        p = np.c_[R * np.sin(th), R - R * np.cos(th)]
        t = np.c_[np.cos(th), np.sin(th)]
    else:
        p = np.c_[s, np.zeros_like(s)]
        t = np.c_[np.ones_like(s), np.zeros_like(s)]
    n = np.c_[-t[:, 1], t[:, 0]]
    return p, t, n


def _offset_line(spec, s0, s1, d, step=0.5) -> np.ndarray:
    if spec.template == "curve":
        k = max(2, int(math.ceil((s1 - s0) / step)) + 1)
        s = np.linspace(s0, s1, k)
    else:
        s = np.array([s0, s1])
    p, _, n = centerline(spec, s)
    return p + d * n


def generate_gt(spec: ScenarioSpec) -> GlobalVectorMap:
    W, L = spec.road_width, spec.length
    if spec.template == "curve" and spec.radius <= W / 2:
        raise SpecError("curve radius must exceed half the road width")
    span = W if spec.crossing_length is None else spec.crossing_length
    for sc in spec.crossings:
        if not 0.0 <= sc <= L:
            raise SpecError(f"crossing station {sc} outside road [0, {L}]")
        if spec.template == "intersection" and abs(sc - L / 2) <= W / 2 + 0.5:
            raise SpecError(f"crossing station {sc} falls inside the intersection")

    offsets = [-W / 2 + k * spec.lane_width for k in range(1, spec.lane_count)]
    dividers, boundaries = [], []
    if spec.template == "intersection":
        gap = (L / 2 - W / 2, L / 2 + W / 2)
        ranges = [(0.0, gap[0]), (gap[1], L)]
        for a, b in ranges:
            dividers += [_offset_line(spec, a, b, d) for d in offsets]
            boundaries += [_offset_line(spec, a, b, d) for d in (-W / 2, W / 2)]
        # cross road along +y through station L/2
        for a, b in ((-L / 2, -W / 2), (W / 2, L / 2)):
            for d in offsets:
                dividers.append(np.array([[L / 2 + d, a], [L / 2 + d, b]]))
            for d in (-W / 2, W / 2):
                boundaries.append(np.array([[L / 2 + d, a], [L / 2 + d, b]]))
    else:
        dividers = [_offset_line(spec, 0.0, L, d) for d in offsets]
        boundaries = [_offset_line(spec, 0.0, L, d) for d in (-W / 2, W / 2)]
    crossings = []
    for sc in spec.crossings:
        p, _, n = centerline(spec, [sc])
        crossings.append(np.vstack([p - 0.5 * span * n, p + 0.5 * span * n]))

    gmap = GlobalVectorMap(config={"scenario": _spec_dict(spec)}, scene=f"synthetic-{spec.template}-{spec.seed}")
    gid = 0
    for c, lines in ((SemanticClass.PED_CROSSING, crossings),
                     (SemanticClass.DIVIDER, dividers),
                     (SemanticClass.BOUNDARY, boundaries)):
        for pts in lines:
            gmap.elements[c].append(GlobalPolyline(gid, Polyline(c, pts), frozenset({0}), frozenset({gid})))
            gid += 1
    return gmap


def _spec_dict(spec):
    d = asdict(spec)
    d["crossings"] = list(spec.crossings)
    return d


# observation simulation ------------------------------------------------------

def clip_to_disk(pts: np.ndarray, center, r: float) -> list[np.ndarray]:
    """Pieces of a polyline lying inside a closed disk."""
    c = np.asarray(center, dtype=np.float64)
    pieces, cur = [], []
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        ac = a - c
        A = ab @ ab
        B = 2 * (ac @ ab)
        C = ac @ ac - r * r
        disc = B * B - 4 * A * C
        if disc <= 0:
            if cur:
                pieces.append(cur)
                cur = []
            continue
        sq = math.sqrt(disc)
        t0, t1 = (-B - sq) / (2 * A), (-B + sq) / (2 * A)
        lo, hi = max(t0, 0.0), min(t1, 1.0)
        if lo >= hi:
            if cur:
                pieces.append(cur)
                cur = []
            continue
        p_lo, p_hi = a + lo * ab, a + hi * ab
        if not cur:
            cur = [p_lo]
        elif lo > 0.0:
            pieces.append(cur)
            cur = [p_lo]
        cur.append(p_hi)
        if hi < 1.0:
            pieces.append(cur)
            cur = []
    if cur:
        pieces.append(cur)
    out = []
    for pc in pieces:
        arr = dedupe(np.array(pc))
        if len(arr) >= 2:
            out.append(arr)
    return out


def _disk_stations(pts: np.ndarray, centers: np.ndarray, r: float) -> list[tuple[float, float]]:
    """Merged arc-length intervals of a polyline lying inside any of the disks."""
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    spans = []
    for k, (a, b) in enumerate(zip(pts[:-1], pts[1:])):
        ab = b - a
        A = ab @ ab
        ac = a - centers
        B = 2 * (ac @ ab)
        C = np.einsum("ij,ij->i", ac, ac) - r * r
        disc = B * B - 4 * A * C
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        lo = np.maximum((-B - sq) / (2 * A), 0.0)
        hi = np.minimum((-B + sq) / (2 * A), 1.0)
        seglen = cum[k + 1] - cum[k]
        for l, h in zip(lo[hit & (lo < hi)], hi[hit & (lo < hi)]):
            spans.append((cum[k] + l * seglen, cum[k] + h * seglen))
    spans.sort()
    merged = []
    for s0, s1 in spans:
        if merged and s0 <= merged[-1][1] + 1e-9:
            merged[-1] = (merged[-1][0], max(merged[-1][1], s1))
        else:
            merged.append((s0, s1))
    return merged


def observable_gt(gt: GlobalVectorMap, spec: ScenarioSpec) -> GlobalVectorMap:
    """Ground truth restricted to the union of the per-frame sensing disks."""
    centers = np.array([ego_pose_at(spec, k).t for k in range(spec.frame_count)])
    out = GlobalVectorMap(config=dict(gt.config), scene=gt.scene)
    if len(centers) == 0:
        return out
    for g in gt.all():
        for s0, s1 in _disk_stations(g.geometry.pts, centers, spec.fov_range):
            if s1 - s0 <= 1e-9:
                continue
            piece = sub_polyline(g.geometry.pts, s0, s1)
            if len(piece) >= 2:
                out.elements[g.class_id].append(
                    GlobalPolyline(g.global_id, Polyline(g.class_id, piece), g.support_frames, g.source_ids))
    return out


def _densify_spacing(pts: np.ndarray, spacing: float) -> np.ndarray:
    L = arc_length(pts)
    n = max(1, int(math.ceil(L / spacing - 1e-9)))
    return point_at(pts, np.linspace(0.0, L, n + 1))


def ego_pose_at(spec: ScenarioSpec, k: int) -> Pose2D:
    s = k * spec.frame_spacing
    p, t, n = centerline(spec, [s])
    lat = spec.wander * math.sin(2 * math.pi * s / 50.0) if spec.wander else 0.0
    pos = p[0] + lat * n[0]
    return Pose2D(pos[0], pos[1], math.atan2(t[0, 1], t[0, 0]))


def simulate_frames(gt: GlobalVectorMap, spec: ScenarioSpec) -> list[FrameObservation]:
    rng = Xoshiro256(spec.seed)
    frames = []
    for k in range(spec.frame_count):
        if k * spec.frame_spacing > spec.length + 1e-9:
            raise SpecError("ego path runs past the end of the road")
        pose = ego_pose_at(spec, k)
        inv = pose.inverse()
        polys = []
        for g in gt.all():
            for piece in clip_to_disk(g.geometry.pts, pose.t, spec.fov_range):
                u_drop, u_frag = rng.uniform(), rng.uniform()
                gap_len, u_pos = rng.uniform(1.0, 5.0), rng.uniform()
                if u_drop < spec.dropout_rate:
                    continue
                local = inv.apply(piece)
                parts = [local]
                L = arc_length(local)
                if u_frag < spec.fragment_rate and L > gap_len + 1.0:
                    s0 = 0.5 + u_pos * (L - gap_len - 1.0)
                    parts = [sub_polyline(local, 0.0, s0), sub_polyline(local, s0 + gap_len, L)]
                for part in parts:
                    dense = _densify_spacing(part, spec.vertex_spacing)
                    if spec.obs_noise > 0:
                        noise = np.array(rng.normals(2 * len(dense), spec.obs_noise)).reshape(-1, 2)
                        dense = dense + noise
                    dense = dedupe(dense)
                    if len(dense) >= 2:
                        polys.append(FramePolyline(Polyline(g.class_id, dense), g.global_id))
        frames.append(FrameObservation(k, pose, tuple(polys)))
    return frames


# perturbation protocol ------------------------------------------------------

@dataclass(frozen=True)
class PerturbationProtocol:
    alpha: float
    poses: tuple[Pose2D, ...]
    sigma_xy: float = 1.0
    sigma_theta_deg: float = 2.0

    @property
    def K(self) -> int:
        return len(self.poses)


def perturbations(alpha: float, sigma_xy: float = 1.0, sigma_theta_deg: float = 2.0) -> PerturbationProtocol:
    """Eight fixed ego-frame offsets of magnitude sigma_xy*alpha (m) and sigma_theta*alpha (deg)."""
    if not 1.0 <= alpha <= 3.0:
        raise SpecError(f"alpha must lie in [1, 3], got {alpha}")
    m = sigma_xy * alpha
    yaw = math.radians(sigma_theta_deg * alpha)
    h = m / math.sqrt(2.0)
    poses = [Pose2D(m, 0, 0), Pose2D(-m, 0, 0), Pose2D(0, m, 0), Pose2D(0, -m, 0)]
    for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        poses.append(Pose2D(sx * h, sy * h, sx * sy * yaw))
    return PerturbationProtocol(alpha, tuple(poses), sigma_xy, sigma_theta_deg)


def perturbed_init(true_pose: Pose2D, p: Pose2D) -> Pose2D:
    """Initial guess = true pose followed by an ego-frame perturbation."""
    return true_pose.compose(p)
