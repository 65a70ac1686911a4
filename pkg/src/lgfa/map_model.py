"""Poses, per-frame observations, the global vector map and augmented frames."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import CLASSES, Polyline, SemanticClass, as_points
from .errors import GeometryError

TWO_PI = 2.0 * math.pi


def wrap_angle(phi: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(phi, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


@dataclass(frozen=True)
class Pose2D:
    """Planar rigid transform p -> R(phi) p + t (ego -> global)."""

    tx: float = 0.0
    ty: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        vals = (float(self.tx), float(self.ty), float(self.phi))
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite pose {vals}")
        object.__setattr__(self, "tx", vals[0])
        object.__setattr__(self, "ty", vals[1])
        object.__setattr__(self, "phi", wrap_angle(vals[2]))

    @classmethod
    def identity(cls) -> "Pose2D":
        return cls(0.0, 0.0, 0.0)

    @property
    def t(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    @property
    def R(self) -> np.ndarray:
        c, s = math.cos(self.phi), math.sin(self.phi)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts) -> np.ndarray:
        """Transform a single point ``(2,)`` or an ``(N, 2)`` array."""
        p = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.phi), math.sin(self.phi)
        x, y = p[..., 0], p[..., 1]
        return np.stack([c * x - s * y + self.tx, s * x + c * y + self.ty], axis=-1)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """self o other: apply `other` first, then `self`."""
        c, s = math.cos(self.phi), math.sin(self.phi)
        return Pose2D(
            c * other.tx - s * other.ty + self.tx,
            s * other.tx + c * other.ty + self.ty,
            self.phi + other.phi,
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.phi), math.sin(self.phi)
        return Pose2D(-(c * self.tx + s * self.ty), s * self.tx - c * self.ty, -self.phi)

    def as_list(self) -> list[float]:
        return [self.tx, self.ty, self.phi]


def pose_apply(T: Pose2D, p) -> np.ndarray:
    return T.apply(p)


def pose_compose(A: Pose2D, B: Pose2D) -> Pose2D:
    return A.compose(B)


def pose_inverse(T: Pose2D) -> Pose2D:
    return T.inverse()


def transform_polyline(T: Pose2D, poly: Polyline) -> Polyline:
    return Polyline(poly.class_id, T.apply(poly.pts))


@dataclass(frozen=True)
class FramePolyline:
    geometry: Polyline
    persistent_id: Optional[int] = None

    @property
    def class_id(self) -> SemanticClass:
        return self.geometry.class_id


@dataclass(frozen=True)
class FrameObservation:
    frame_index: int
    ego_pose_ref: Pose2D
    polylines: tuple[FramePolyline, ...] = ()

    def by_class(self, c: SemanticClass) -> list[FramePolyline]:
        return [fp for fp in self.polylines if fp.class_id == c]

    def counts(self) -> dict[SemanticClass, int]:
        return {c: len(self.by_class(c)) for c in CLASSES}


@dataclass
class GlobalPolyline:
    global_id: int
    geometry: Polyline
    support_frames: frozenset[int] = frozenset()
    source_ids: frozenset[int] = frozenset()

    @property
    def class_id(self) -> SemanticClass:
        return self.geometry.class_id


@dataclass
class GlobalVectorMap:
    """Class-partitioned scene-level polylines."""

    elements: dict[SemanticClass, list[GlobalPolyline]] = field(
        default_factory=lambda: {c: [] for c in CLASSES}
    )
    config: dict = field(default_factory=dict)
    scene: str = ""

    def __post_init__(self):
        for c in CLASSES:
            self.elements.setdefault(c, [])

    def of(self, c: SemanticClass) -> list[GlobalPolyline]:
        return self.elements[c]

    def all(self):
        for c in CLASSES:
            yield from self.elements[c]

    def polylines(self, c: SemanticClass) -> list[Polyline]:
        return [g.geometry for g in self.elements[c]]

    def copy(self) -> "GlobalVectorMap":
        return GlobalVectorMap(
            {c: [GlobalPolyline(g.global_id, g.geometry, g.support_frames, g.source_ids)
                 for g in self.elements[c]] for c in CLASSES},
            dict(self.config),
            self.scene,
        )

    @classmethod
    def from_polylines(cls, polys, scene: str = "") -> "GlobalVectorMap":
        m = cls(scene=scene)
        counters = {c: 0 for c in CLASSES}
        for p in polys:
            m.elements[p.class_id].append(
                GlobalPolyline(counters[p.class_id], p, frozenset({0}))
            )
            counters[p.class_id] += 1
        return m


@dataclass(frozen=True)
class ObjectBox:
    cx: float
    cy: float
    yaw: float
    length: float
    width: float
    label: str = ""

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise GeometryError("box length and width must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ np.array([[c, s], [-s, c]]) + self.center


@dataclass
class AugmentedFrame:
    frame_index: int
    refined_pose: Pose2D
    completed_map: list  # CompletedPolyline items, global frame
    ego_in_map: Pose2D
    objects_in_map: list[ObjectBox]


def polyline(c: SemanticClass, pts) -> Polyline:
    return Polyline(c, as_points(pts))
