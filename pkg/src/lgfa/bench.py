"""End-to-end benchmark: simulate, fuse, localize under the perturbation protocol, complete.

Raw per-case rows are collected first and aggregated by :mod:`evalmetrics`;
every row carries its full key so parallel fan-out can be merged in any order.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evalmetrics as em
from .baselines import icp_trimmed, ndt_2d
from .completion import CompletionConfig, complete, completion_rate, pose_only
from .errors import ClassAbsent, DegenerateScale, InsufficientInput, LgfaError
from .fusion import FusionConfig, build_map
from .geom import CLASSES, Polyline, SemanticClass, resample
from .localization import LocalizationConfig, localize
from .map_model import FrameObservation, GlobalVectorMap, Pose2D
from .scenario import (
    ScenarioSpec,
    clip_to_disk,
    generate_gt,
    observable_gt,
    perturbations,
    perturbed_init,
    simulate_frames,
)

log = logging.getLogger(__name__)

METHODS = ("gnss", "icp", "ndt", "ours")


@dataclass(frozen=True)
class BenchConfig:
    seeds: tuple[int, ...] = tuple(range(20))
    alphas: tuple[float, ...] = (1.0, 2.0, 3.0)
    methods: tuple[str, ...] = METHODS
    eval_frames: tuple[int, ...] = (4, 10, 16)
    completion: bool = True
    map_quality: bool = True

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if not self.seeds or not self.alphas or not self.eval_frames:
            raise ValueError("bench needs at least one seed, alpha and evaluation frame")


@dataclass
class SceneResult:
    seed: int
    loc_rows: list[dict] = field(default_factory=list)
    map_rows: list[dict] = field(default_factory=list)
    completion_rows: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    error: Optional[str] = None


def _merged_points(polys, step: float, cap: int) -> np.ndarray:
    pts = np.vstack([resample(p, step) for p in polys]) if polys else np.zeros((0, 2))
    stride = max(1, -(-len(pts) // cap))
    return pts[::stride]


def frame_reference(gt: GlobalVectorMap, pose: Pose2D, r: float) -> list[Polyline]:
    """Ground truth inside the sensing disk of one frame: the completion reference."""
    return [Polyline(g.class_id, piece) for g in gt.all() for piece in clip_to_disk(g.geometry.pts, pose.t, r)]


def run_scene(spec: ScenarioSpec, bcfg: BenchConfig, fcfg: FusionConfig, lcfg: LocalizationConfig,
              ccfg: CompletionConfig) -> SceneResult:
    res = SceneResult(spec.seed)
    try:
        _run_scene(spec, bcfg, fcfg, lcfg, ccfg, res)
    except LgfaError as e:
        res.error = f"scene seed={spec.seed}: {type(e).__name__}: {e}"
    return res


def _run_scene(spec, bcfg, fcfg, lcfg, ccfg, res: SceneResult) -> None:
    gt = generate_gt(spec)
    frames = simulate_frames(gt, spec)
    gmap = build_map(frames, fcfg, scene=gt.scene)
    if bcfg.map_quality:
        ref = observable_gt(gt, spec)
        for c, ch in em.chamfer_map(gmap, ref, fcfg.resample_step).items():
            try:
                se = em.scale_error(gmap, ref, fcfg.resample_step, classes=[c])
            except (DegenerateScale, ClassAbsent) as e:
                res.warnings.append(f"seed {spec.seed} {c.value}: scale error skipped ({e})")
                continue
            res.map_rows.append({"seed": spec.seed, "class": c, "chamfer": ch, "scale_error": se})

    dst = _merged_points([p for c in CLASSES for p in gmap.polylines(c)], lcfg.step, lcfg.max_points_global)
    by_index = {f.frame_index: f for f in frames}
    for fi in bcfg.eval_frames:
        if fi not in by_index:
            raise InsufficientInput(f"seed {spec.seed}: evaluation frame {fi} not simulated")
        frame = by_index[fi]
        truth = frame.ego_pose_ref
        src = _merged_points([fp.geometry for fp in frame.polylines], lcfg.step, lcfg.max_points_local)
        reference = frame_reference(gt, truth, spec.fov_range)
        for alpha in bcfg.alphas:
            for k, p in enumerate(perturbations(alpha).poses):
                theta0 = perturbed_init(truth, p)
                ours = None
                for m in bcfg.methods:
                    est, ok = _estimate(m, frame, gmap, theta0, src, dst, lcfg)
                    if m == "ours":
                        ours = est
                    if not ok:
                        res.warnings.append(f"seed {spec.seed} frame {fi} alpha {alpha} k {k}: {m} fell back to the initial pose")
                    t_err, h_err = em.pose_errors(est, truth)
                    res.loc_rows.append({"seed": spec.seed, "frame": fi, "alpha": float(alpha), "k": k,
                                         "method": m, "trans": t_err, "head": h_err, "ok": ok})
                if bcfg.completion:
                    if ours is None:
                        ours, _ = _estimate("ours", frame, gmap, theta0, src, dst, lcfg)
                    full = completion_rate(complete(gmap, frame, ours, ccfg), reference, ccfg)
                    base = completion_rate(pose_only(frame, theta0), reference, ccfg)
                    for variant, rates in (("full", full), ("pose_only", base)):
                        for c in CLASSES:
                            if c in full:  # classes with reference geometry in view
                                res.completion_rows.append(
                                    {"seed": spec.seed, "frame": fi, "alpha": float(alpha), "k": k,
                                     "variant": variant, "class": c, "rate": rates.get(c, 0.0)})


def _estimate(method: str, frame: FrameObservation, gmap: GlobalVectorMap, theta0: Pose2D,
              src: np.ndarray, dst: np.ndarray, lcfg: LocalizationConfig) -> tuple[Pose2D, bool]:
    """Pose estimate and whether the method ran (False: fell back to theta0)."""
    try:
        if method == "gnss":
            return theta0, True
        if method == "ours":
            return localize(frame, gmap, theta0, lcfg).pose, True
        if method == "icp":
            return icp_trimmed(src, dst, theta0), True
        if method == "ndt":
            return ndt_2d(src, dst, theta0), True
    except InsufficientInput:
        return theta0, False
    raise ValueError(f"unknown method {method!r}")


def threads() -> int:
    try:
        return max(1, int(os.environ.get("LGFA_THREADS", "1")))
    except ValueError:
        return 1


def run(base: ScenarioSpec, bcfg: BenchConfig, fcfg: FusionConfig = FusionConfig(),
        lcfg: LocalizationConfig = LocalizationConfig(),
        ccfg: CompletionConfig = CompletionConfig()) -> list[SceneResult]:
    specs = [base.replace(seed=s) for s in bcfg.seeds]
    n = min(threads(), len(specs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(run_scene, specs, *[[x] * len(specs) for x in (bcfg, fcfg, lcfg, ccfg)]))
    else:
        results = [run_scene(s, bcfg, fcfg, lcfg, ccfg) for s in specs]
    return sorted(results, key=lambda r: r.seed)


# raw rows <-> CSV -------------------------------------------------------------

LOC_CASE_COLS = ["seed", "frame", "alpha", "k", "method", "trans", "head", "ok"]
MAP_SCENE_COLS = ["seed", "class", "chamfer", "scale_error"]
COMPLETION_CASE_COLS = ["seed", "frame", "alpha", "k", "variant", "class", "rate"]


def rows_csv(cols: list[str], rows: list[dict]) -> str:
    return em.csv_text(cols, [[r[c] for c in cols] for r in rows])


def parse_rows(text: str) -> list[dict]:
    import csv
    import io

    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in r.items():
            if k in ("seed", "frame", "k"):
                row[k] = int(v)
            elif k in ("alpha", "trans", "head", "chamfer", "scale_error", "rate"):
                row[k] = float(v)
            elif k == "class":
                row[k] = SemanticClass(v)
            elif k == "ok":
                row[k] = v == "True"
            else:
                row[k] = v
        out.append(row)
    return out


def write_raw(out: Path, results: list[SceneResult]) -> dict[str, list[dict]]:
    out.mkdir(parents=True, exist_ok=True)
    raw = {
        "loc_cases.csv": (LOC_CASE_COLS, [r for s in results for r in s.loc_rows]),
        "map_scenes.csv": (MAP_SCENE_COLS, [r for s in results for r in s.map_rows]),
        "completion_cases.csv": (COMPLETION_CASE_COLS, [r for s in results for r in s.completion_rows]),
    }
    for name, (cols, rows) in raw.items():
        em.write_text(out / name, rows_csv(cols, rows))
    return {k: v[1] for k, v in raw.items()}


def report(out: Path, loc_rows: list[dict], map_rows: list[dict], completion_rows: list[dict]) -> list[str]:
    """Aggregate raw rows into the summary CSVs and SVG charts; returns the files written."""
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if loc_rows:
        stats = em.loc_stats(loc_rows)
        em.write_text(out / "loc_errors.csv", em.loc_errors_csv(stats))
        for metric, unit, attr in (("translation", "m", "trans_mean"), ("heading", "deg", "head_mean")):
            series: dict = {}
            for s in stats:
                series.setdefault(s.method, []).append((float(s.alpha), getattr(s, attr)))
            name = f"loc_{metric}.svg"
            em.write_text(out / name, em.line_chart_svg(series, f"Mean {metric} error vs alpha",
                                                        "alpha", f"{metric} error ({unit})"))
            written.append(name)
        written.insert(0, "loc_errors.csv")
    if map_rows:
        em.write_text(out / "map_quality.csv", em.map_quality_csv(em.map_quality(map_rows)))
        written.append("map_quality.csv")
    if completion_rows:
        table = em.completion_table(completion_rows)
        em.write_text(out / "completion.csv", em.completion_csv(table))
        groups: dict = {}
        for r in table:
            groups.setdefault(r["class"].value, {})[r["variant"]] = r["rate_mean"]
        em.write_text(out / "completion.svg", em.bar_chart_svg(groups, "Completion rate per class", "rate (%)"))
        written += ["completion.csv", "completion.svg"]
    return written
