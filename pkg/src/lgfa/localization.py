"""Class-constrained bidirectional ICP with a coarse-to-fine schedule.

Forward terms match transformed frame samples to the nearest map segment,
backward terms match map samples to the nearest transformed frame sample.
Both are gated per class, reweighted with the Huber IRLS weight, and the pose
is updated with a closed-form weighted 2D Procrustes fit.  Per-class
averaging of the objective is carried into the Procrustes weights as
``1/|X^c|`` (forward) and ``1/|Y^c|`` (backward).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DegenerateGeometry, InsufficientInput
from .geom import CLASSES, PointIndex, Polyline, SegmentIndex, SemanticClass, resample
from .map_model import FrameObservation, GlobalVectorMap, Pose2D, wrap_angle

PC, DIV, BND = SemanticClass.PED_CROSSING, SemanticClass.DIVIDER, SemanticClass.BOUNDARY
FORWARD, BACKWARD = 0, 1


@dataclass(frozen=True)
class LocalizationConfig:
    step: float = 0.2
    class_weights: dict = field(default_factory=lambda: {PC: 1.0, DIV: 1.0, BND: 1.0})
    gates: dict = field(default_factory=lambda: {PC: 1.5, DIV: 1.5, BND: 1.8})
    coarse_gate: float = 4.0
    coarse_iters: int = 8
    fine_iters: int = 15
    huber_delta: float = 0.5
    eps_conv: float = 1e-4
    pose_diff_scale: float = 5.0
    max_points_global: int = 40_000
    max_points_local: int = 20_000
    min_points: int = 30

    def __post_init__(self):
        for k in ("step", "coarse_gate", "huber_delta", "eps_conv", "pose_diff_scale"):
            if not getattr(self, k) > 0:
                raise ValueError(f"LocalizationConfig.{k} must be positive")
        for k in ("coarse_iters", "fine_iters", "max_points_global", "max_points_local", "min_points"):
            if getattr(self, k) < 1:
                raise ValueError(f"LocalizationConfig.{k} must be >= 1")
        for c in CLASSES:
            if not self.gates.get(c, 0) > 0 or not self.class_weights.get(c, 0) > 0:
                raise ValueError(f"gate and class weight for {c.value} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LocalizationConfig":
        kw = {}
        for k, v in d.items():
            if k in ("class_weights", "gates"):
                v = {SemanticClass(c): float(x) for c, x in v.items()}
            elif k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown localization option {k!r}")
            kw[k] = v
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["class_weights"] = {c.value: w for c, w in self.class_weights.items()}
        out["gates"] = {c.value: g for c, g in self.gates.items()}
        return out


@dataclass
class ClassSamples:
    X: np.ndarray  # frame samples (ego frame)
    Y: np.ndarray  # map samples (global frame)
    seg_a: np.ndarray
    seg_b: np.ndarray
    _seg_index: Optional[SegmentIndex] = None

    @property
    def seg_index(self) -> SegmentIndex:
        if self._seg_index is None:
            self._seg_index = SegmentIndex(self.seg_a, self.seg_b)
        return self._seg_index


@dataclass
class SampledClassSets:
    classes: dict[SemanticClass, ClassSamples]

    def active(self, min_points: int, only: Optional[Iterable[SemanticClass]] = None):
        cs = CLASSES if only is None else tuple(only)
        return [c for c in cs if c in self.classes
                and len(self.classes[c].X) >= min_points
                and len(self.classes[c].Y) >= min_points
                and len(self.classes[c].seg_a) > 0]


def _decimate(samples: list[np.ndarray], cap: int) -> list[np.ndarray]:
    n = sum(len(s) for s in samples)
    stride = max(1, math.ceil(n / cap))
    if stride == 1:
        return samples
    out = []
    for s in samples:
        keep = s[::stride]
        if len(s) > 1 and not np.array_equal(keep[-1], s[-1]) and len(keep) < 2:
            keep = np.vstack([keep, s[-1:]])
        out.append(keep)
    return out


def sample_sets(frame_polys: dict[SemanticClass, list[Polyline]],
                map_polys: dict[SemanticClass, list[Polyline]],
                cfg: LocalizationConfig) -> SampledClassSets:
    """Resample both sides at the configured step and apply the point caps."""
    fs = {c: [resample(p, cfg.step) for p in frame_polys.get(c, [])] for c in CLASSES}
    ms = {c: [resample(p, cfg.step) for p in map_polys.get(c, [])] for c in CLASSES}
    fs_all = _decimate([s for c in CLASSES for s in fs[c]], cfg.max_points_local)
    ms_all = _decimate([s for c in CLASSES for s in ms[c]], cfg.max_points_global)
    out = {}
    i = j = 0
    for c in CLASSES:
        xs = fs_all[i:i + len(fs[c])]
        ys = ms_all[j:j + len(ms[c])]
        i += len(fs[c])
        j += len(ms[c])
        X = np.vstack(xs) if xs else np.zeros((0, 2))
        Y = np.vstack(ys) if ys else np.zeros((0, 2))
        a = [y[:-1] for y in ys if len(y) > 1]
        b = [y[1:] for y in ys if len(y) > 1]
        out[c] = ClassSamples(X, Y, np.vstack(a) if a else np.zeros((0, 2)),
                              np.vstack(b) if b else np.zeros((0, 2)))
    return SampledClassSets(out)


@dataclass
class Correspondence:
    kind: int
    class_id: SemanticClass
    source: np.ndarray
    target: np.ndarray
    residual: float
    weight: float


@dataclass
class CorrespondenceSet:
    """Struct-of-arrays correspondence set (sources are untransformed frame points)."""

    kind: np.ndarray
    cls: np.ndarray  # index into CLASSES
    src: np.ndarray
    tgt: np.ndarray
    residual: np.ndarray
    norm: np.ndarray  # 1/|X^c| or 1/|Y^c|
    weight: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.kind)

    def items(self) -> list[Correspondence]:
        w = self.weight if self.weight is not None else np.full(len(self), np.nan)
        return [Correspondence(int(k), CLASSES[int(c)], s, t, float(r), float(wi))
                for k, c, s, t, r, wi in zip(self.kind, self.cls, self.src, self.tgt, self.residual, w)]

    def count_by_class(self) -> dict[SemanticClass, int]:
        return {c: int(np.sum(self.cls == i)) for i, c in enumerate(CLASSES)}

    @classmethod
    def concat(cls, parts: list["CorrespondenceSet"]) -> "CorrespondenceSet":
        if not parts:
            z = np.zeros(0)
            return cls(z.astype(int), z.astype(int), np.zeros((0, 2)), np.zeros((0, 2)), z, z)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("kind", "cls", "src", "tgt", "residual", "norm")))


def build_corr(sets: SampledClassSets, theta: Pose2D, gates: dict, min_points: int,
               only: Optional[Iterable[SemanticClass]] = None) -> CorrespondenceSet:
    parts = []
    for c in sets.active(min_points, only):
        cs = sets.classes[c]
        ci = CLASSES.index(c)
        r = gates[c]
        Xt = theta.apply(cs.X)
        d, k, foot = cs.seg_index.nearest(Xt, radius=r)
        ok = np.isfinite(d)
        n = int(ok.sum())
        parts.append(CorrespondenceSet(np.full(n, FORWARD), np.full(n, ci), cs.X[ok], foot[ok], d[ok],
                                       np.full(n, 1.0 / len(cs.X))))
        db, ib = PointIndex(Xt).nearest(cs.Y, radius=r)
        ok = np.isfinite(db)
        n = int(ok.sum())
        parts.append(CorrespondenceSet(np.full(n, BACKWARD), np.full(n, ci), cs.X[ib[ok]], cs.Y[ok], db[ok],
                                       np.full(n, 1.0 / len(cs.Y))))
    return CorrespondenceSet.concat(parts)


def huber_irls(r, delta: float):
    r = np.asarray(r, dtype=np.float64)
    return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


def huber_loss(r, delta: float):
    r = np.asarray(r, dtype=np.float64)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def robust_weights(corrs: CorrespondenceSet, cfg: LocalizationConfig) -> CorrespondenceSet:
    wc = np.array([cfg.class_weights[c] for c in CLASSES])
    corrs.weight = wc[corrs.cls] * huber_irls(corrs.residual, cfg.huber_delta)
    return corrs


def weighted_procrustes(src, tgt, w) -> Pose2D:
    """Closed-form minimiser of sum w_i |R src_i + t - tgt_i|^2."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    W = w.sum()
    if len(src) < 2 or not W > 0:
        raise DegenerateGeometry("need >= 2 correspondences with positive total weight")
    if np.all(src == src[0]):
        raise DegenerateGeometry("all source points coincide; rotation unobservable")
    xm = (w[:, None] * src).sum(0) / W
    ym = (w[:, None] * tgt).sum(0) / W
    xc, yc = src - xm, tgt - ym
    cross = float(np.sum(w * (xc[:, 0] * yc[:, 1] - xc[:, 1] * yc[:, 0])))
    dot = float(np.sum(w * (xc[:, 0] * yc[:, 0] + xc[:, 1] * yc[:, 1])))
    phi = math.atan2(cross, dot)
    c, s = math.cos(phi), math.sin(phi)
    t = ym - np.array([c * xm[0] - s * xm[1], s * xm[0] + c * xm[1]])
    return Pose2D(t[0], t[1], phi)


def fit_objective(src, tgt, w, pose: Pose2D) -> float:
    r = pose.apply(src) - tgt
    return float(np.sum(w * (r[:, 0] ** 2 + r[:, 1] ** 2)))


def pose_diff(a: Pose2D, b: Pose2D, lam: float) -> float:
    return math.sqrt((a.tx - b.tx) ** 2 + (a.ty - b.ty) ** 2 + (lam * wrap_angle(a.phi - b.phi)) ** 2)


def objective(sets: SampledClassSets, theta: Pose2D, gates: dict, cfg: LocalizationConfig,
              only=None) -> float:
    """Class-weighted bidirectional Huber objective; residuals truncated at the gate."""
    total = 0.0
    for c in sets.active(cfg.min_points, only):
        cs = sets.classes[c]
        r = gates[c]
        Xt = theta.apply(cs.X)
        df, _, _ = cs.seg_index.nearest(Xt)
        db, _ = PointIndex(Xt).nearest(cs.Y)
        f = huber_loss(np.minimum(df, r), cfg.huber_delta).mean()
        b = huber_loss(np.minimum(db, r), cfg.huber_delta).mean()
        total += cfg.class_weights[c] * (f + b)
    return float(total)


@dataclass
class LocalizationResult:
    pose: Pose2D
    iterations: dict = field(default_factory=dict)
    final_objective: float = float("nan")
    converged: bool = False
    correspondences_last: dict = field(default_factory=dict)


def icp_solve(sets: SampledClassSets, theta0: Pose2D, gates: dict, iters: int,
              cfg: LocalizationConfig, only=None, stage: str = "solve") -> LocalizationResult:
    """Alternate gated correspondences, robust weights and Procrustes updates."""
    if not sets.active(cfg.min_points, only):
        raise InsufficientInput("every class has too few samples on one side")
    theta = theta0
    converged = False
    used = 0
    last = {}
    for _ in range(iters):
        P = build_corr(sets, theta, gates, cfg.min_points, only)
        if len(P) == 0:
            break
        used += 1
        robust_weights(P, cfg)
        last = P.count_by_class()
        try:
            new = weighted_procrustes(P.src, P.tgt, P.weight * P.norm)
        except DegenerateGeometry:
            break
        step = pose_diff(new, theta, cfg.pose_diff_scale)
        theta = new
        if step < cfg.eps_conv:
            converged = True
            break
    f0 = objective(sets, theta0, gates, cfg, only)
    f1 = objective(sets, theta, gates, cfg, only)
    if f1 > f0 + 1e-12:
        converged = False
    return LocalizationResult(theta, {stage: used}, f1, converged, last)


def frame_polylines(frame: FrameObservation) -> dict[SemanticClass, list[Polyline]]:
    return {c: [fp.geometry for fp in frame.by_class(c)] for c in CLASSES}


def map_polylines(gmap: GlobalVectorMap) -> dict[SemanticClass, list[Polyline]]:
    return {c: gmap.polylines(c) for c in CLASSES}


def localize(frame: FrameObservation, gmap: GlobalVectorMap, theta0: Pose2D,
             cfg: LocalizationConfig = LocalizationConfig(),
             sets: Optional[SampledClassSets] = None) -> LocalizationResult:
    """Boundary-only coarse stage, then all-class fine stage started at its result."""
    if sets is None:
        sets = sample_sets(frame_polylines(frame), map_polylines(gmap), cfg)
    n_frame = sum(len(cs.X) for cs in sets.classes.values())
    if n_frame < cfg.min_points:
        raise InsufficientInput(f"frame {frame.frame_index}: {n_frame} samples < {cfg.min_points}")
    theta1 = theta0
    iters = {"coarse": 0, "fine": 0}
    if sets.active(cfg.min_points, [BND]):
        r1 = icp_solve(sets, theta0, {BND: cfg.coarse_gate}, cfg.coarse_iters, cfg, [BND], "coarse")
        theta1 = r1.pose
        iters["coarse"] = r1.iterations["coarse"]
    r2 = icp_solve(sets, theta1, cfg.gates, cfg.fine_iters, cfg, None, "fine")
    iters["fine"] = r2.iterations["fine"]
    # stage 2 starts from the stage-1 pose, so its result already is the composition
    return LocalizationResult(r2.pose, iters, r2.final_objective, r2.converged, r2.correspondences_last)
