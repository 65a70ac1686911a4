"""Command-line entry point: simulate, build-map, localize, complete, augment, bench, report."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

from . import __version__
from . import bench as bench_mod
from . import evalmetrics as em
from . import io as lio
from .completion import CompletionConfig, complete
from .errors import (
    ClassAbsent,
    ClassMismatch,
    DegenerateGeometry,
    DegenerateMerge,
    DegenerateScale,
    EmptyAggregate,
    EmptyInput,
    GeometryError,
    InsufficientInput,
    LgfaError,
    SchemaError,
    SpecError,
)
from .foreground import augment
from .fusion import FusionConfig, build_map
from .localization import LocalizationConfig, localize
from .map_model import Pose2D
from .scenario import ScenarioSpec, generate_gt, perturbations, perturbed_init, simulate_frames

log = logging.getLogger("lgfa")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
SECTIONS = ("scenario", "fusion", "localization", "completion", "bench")
INPUT_ERRORS = (SchemaError, SpecError, GeometryError, ClassMismatch, EmptyInput, ValueError, OSError)
NUMERIC_ERRORS = (DegenerateGeometry, DegenerateMerge, DegenerateScale, InsufficientInput, EmptyAggregate,
                  ClassAbsent)


class CliError(Exception):
    def __init__(self, code: int, message: str, context: Optional[dict] = None):
        super().__init__(message)
        self.code = code
        self.context = context or {}


class NonConvergence(Exception):
    """Raised after outputs are written when --strict is set and some solve did not converge."""


# configuration -------------------------------------------------------------------

def _parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def load_config(path: Optional[str], overrides: list[str], primary: str) -> dict:
    """Nested {section: {field: value}} from a JSON file plus dotted `--cfg` overrides.

    A file whose top level holds no section names is taken as the primary section
    (e.g. a bare FusionConfig object for build-map).  Overrides win.
    """
    cfg: dict = {s: {} for s in SECTIONS}
    if path:
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(obj, dict):
            raise SchemaError(f"{path}: config must be a JSON object")
        if any(k in SECTIONS for k in obj):
            for k, v in obj.items():
                if k not in SECTIONS or not isinstance(v, dict):
                    raise SchemaError(f"{path}: unknown config section {k!r}")
                cfg[k].update(v)
        else:
            cfg[primary].update(obj)
    for ov in overrides:
        key, sep, val = ov.partition("=")
        if not sep:
            raise SchemaError(f"--cfg {ov!r}: expected section.field=value")
        section, dot, name = key.partition(".")
        if not dot:
            section, name = primary, key
        if section not in SECTIONS:
            raise SchemaError(f"--cfg {ov!r}: unknown section {section!r}")
        target = cfg[section]
        *parents, leaf = name.split(".")
        for p in parents:  # nested dicts such as localization.gates.divider
            target = target.setdefault(p, {})
        target[leaf] = _parse_value(val)
    return cfg


def _dc(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise SchemaError(f"unknown {section} option(s) {sorted(unknown)}")
    return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)


def fusion_cfg(cfg) -> FusionConfig:
    return _dc(FusionConfig, cfg["fusion"], "fusion")


def loc_cfg(cfg) -> LocalizationConfig:
    return LocalizationConfig.from_dict(cfg["localization"])


def completion_cfg(cfg) -> CompletionConfig:
    return _dc(CompletionConfig, cfg["completion"], "completion")


def scenario_spec(spec_arg: Optional[str], cfg: dict) -> ScenarioSpec:
    d: dict = {}
    if spec_arg and spec_arg != "default":
        try:
            d = json.loads(Path(spec_arg).read_text())
        except json.JSONDecodeError as e:
            raise SchemaError(f"{spec_arg}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise SchemaError(f"{spec_arg}: scenario spec must be a JSON object")
    d.update(cfg["scenario"])
    return ScenarioSpec.from_dict(d)


def _csv_list(s: str, conv):
    try:
        return tuple(conv(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise SchemaError(f"cannot parse list {s!r}") from None


# subcommands --------------------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    spec = scenario_spec(args.spec, cfg)
    gt = generate_gt(spec)
    frames = simulate_frames(gt, spec)
    lio.write_frames(args.out_frames, frames, gt.scene)
    lio.write_map(args.out_gt, gt)
    log.info("simulated %d frames, %d GT elements", len(frames), sum(1 for _ in gt.all()))
    return EXIT_OK


def cmd_build_map(args, cfg) -> int:
    frames = lio.read_frames(args.frames)
    m = build_map(frames, fusion_cfg(cfg), scene=lio.read_scene_name(args.frames))
    lio.write_map(args.out, m)
    log.info("built map with %d elements from %d frames", sum(1 for _ in m.all()), len(frames))
    return EXIT_OK


def _init_poses(args, frames) -> dict[int, Pose2D]:
    if args.init == "gnss-protocol":
        p = perturbations(args.alpha).poses[args.k]
    else:
        vals = _csv_list(args.init, float)
        if len(vals) != 3:
            raise SchemaError(f"--init expects tx,ty,phi_deg or gnss-protocol, got {args.init!r}")
        p = Pose2D(vals[0], vals[1], math.radians(vals[2]))
    return {f.frame_index: perturbed_init(f.ego_pose_ref, p) for f in frames}


def cmd_localize(args, cfg) -> int:
    frames = lio.read_frames(args.frames)
    gmap = lio.read_map(args.map)
    lcfg = loc_cfg(cfg)
    inits = _init_poses(args, frames)
    rows, not_converged = [], []
    for f in frames:
        r = localize(f, gmap, inits[f.frame_index], lcfg)
        if not r.converged:
            not_converged.append(f.frame_index)
        terr, herr = ("", "") if args.no_truth else em.pose_errors(r.pose, f.ego_pose_ref)
        rows.append([f.frame_index, r.iterations.get("coarse", 0), r.iterations.get("fine", 0),
                     repr(r.pose.tx), repr(r.pose.ty), repr(math.degrees(r.pose.phi)), terr, herr])
    em.write_text(args.out, em.csv_text(list(lio.POSE_COLUMNS), rows))
    if not_converged:
        log.warning("frames without convergence: %s", not_converged)
        if args.strict:
            raise NonConvergence(f"frames {not_converged} did not converge")
    return EXIT_OK


def _poses_for(frames, path) -> dict[int, Pose2D]:
    poses = lio.read_poses(path)
    missing = [f.frame_index for f in frames if f.frame_index not in poses]
    if missing:
        raise SchemaError(f"{path}: no pose for frames {missing}")
    return poses


def cmd_complete(args, cfg) -> int:
    frames = lio.read_frames(args.frames)
    gmap = lio.read_map(args.map)
    poses = _poses_for(frames, args.poses)
    ccfg = completion_cfg(cfg)
    out = {f.frame_index: complete(gmap, f, poses[f.frame_index], ccfg) for f in frames}
    lio.write_completed(args.out, out, gmap.scene, asdict(ccfg))
    return EXIT_OK


def cmd_augment(args, cfg) -> int:
    frames = lio.read_frames(args.frames)
    poses = _poses_for(frames, args.poses)
    objects = lio.read_objects(args.objects) if args.objects else {}
    raw = lio._load(args.map)
    is_completed = isinstance(raw, dict) and any("runs" in e for e in raw.get("elements", []))
    if is_completed:
        completed = lio.completed_from_obj(raw, args.map)
        scene = raw.get("scene", "")
    else:
        gmap = lio.map_from_obj(raw, args.map)
        ccfg = completion_cfg(cfg)
        completed = {f.frame_index: complete(gmap, f, poses[f.frame_index], ccfg) for f in frames}
        scene = gmap.scene
    out = []
    for f in frames:
        if f.frame_index not in completed:
            raise SchemaError(f"{args.map}: no completed map for frame {f.frame_index}")
        out.append(augment(f, objects.get(f.frame_index, []), poses[f.frame_index], completed[f.frame_index]))
    lio.write_augmented(args.out, out, scene)
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    spec = scenario_spec(args.spec, cfg)
    b = dict(cfg["bench"])
    if args.seeds is not None:
        b["seeds"] = args.seeds
    if args.alpha is not None:
        b["alphas"] = args.alpha
    if args.methods is not None:
        b["methods"] = args.methods
    if args.frames is not None:
        b["eval_frames"] = args.frames
    if isinstance(b.get("seeds"), int):
        b["seeds"] = tuple(range(spec.seed, spec.seed + b["seeds"]))
    for k in ("seeds", "alphas", "methods", "eval_frames"):
        if k in b:
            b[k] = tuple(b[k])
    bcfg = _dc(bench_mod.BenchConfig, b, "bench")
    out = Path(args.out)
    results = bench_mod.run(spec, bcfg, fusion_cfg(cfg), loc_cfg(cfg), completion_cfg(cfg))
    raw = bench_mod.write_raw(out, results)
    for r in results:
        for w in r.warnings:
            log.debug(w)
    # aggregate from the written files so `report` on them reproduces these bytes
    loc, maps, comp = (bench_mod.parse_rows((out / n).read_text())
                       for n in ("loc_cases.csv", "map_scenes.csv", "completion_cases.csv"))
    bench_mod.report(out, loc, maps, comp)
    failed = [r.error for r in results if r.error]
    if failed:
        raise CliError(EXIT_NUMERIC, "bench scenes failed (partial results written)", {"scenes": failed})
    fallbacks = sum(len(r.warnings) for r in results)
    if fallbacks:
        log.warning("%d cases fell back to the initial pose or skipped a metric", fallbacks)
    log.info("bench wrote %s (%d localization rows)", out, len(raw["loc_cases.csv"]))
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    rows = {"loc_cases.csv": [], "map_scenes.csv": [], "completion_cases.csv": []}
    for p in args.inputs:
        p = Path(p)
        files = [p / n for n in rows] if p.is_dir() else [p]
        for f in files:
            if f.name not in rows:
                raise SchemaError(f"{f}: expected one of {sorted(rows)}")
            if f.exists():
                rows[f.name].extend(bench_mod.parse_rows(f.read_text()))
    if not any(rows.values()):
        raise EmptyAggregate("no input rows found")
    bench_mod.report(Path(args.out), rows["loc_cases.csv"], rows["map_scenes.csv"], rows["completion_cases.csv"])
    return EXIT_OK


# argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: %s)" % ", ".join(SECTIONS))
    common.add_argument("--cfg", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="dotted config override, repeatable; wins over --config")
    common.add_argument("--strict", action="store_true", help="treat non-convergence as a failure (exit 3)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="stderr log level")

    ap = argparse.ArgumentParser(prog="lgfa", description=__doc__)
    ap.add_argument("--version", action="version", version=f"lgfa {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic scene")
    p.add_argument("--spec", default="default", help="scenario JSON mirroring ScenarioSpec, or 'default'")
    p.add_argument("--out-frames", required=True, help="output frames JSON")
    p.add_argument("--out-gt", required=True, help="output ground-truth map JSON")
    p.set_defaults(func=cmd_simulate, primary="scenario")

    p = sub.add_parser("build-map", parents=[common], help="fuse frames into a global vector map")
    p.add_argument("--frames", required=True, help="frames JSON")
    p.add_argument("--out", required=True, help="output map JSON")
    p.set_defaults(func=cmd_build_map, primary="fusion")

    p = sub.add_parser("localize", parents=[common], help="refine per-frame poses against a map")
    p.add_argument("--frames", required=True, help="frames JSON")
    p.add_argument("--map", required=True, help="global map JSON")
    p.add_argument("--init", required=True,
                   help="ego-frame offset 'tx,ty,phi_deg' applied to each reference pose, or 'gnss-protocol'")
    p.add_argument("--alpha", type=float, default=1.0, help="noise scale for gnss-protocol (1..3)")
    p.add_argument("--k", type=int, default=0, choices=range(8), help="perturbation index for gnss-protocol")
    p.add_argument("--no-truth", action="store_true",
                   help="leave error columns empty (frame ego poses are not ground truth)")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_localize, primary="localization")

    p = sub.add_parser("complete", parents=[common], help="line completion per frame")
    p.add_argument("--frames", required=True, help="frames JSON")
    p.add_argument("--map", required=True, help="global map JSON")
    p.add_argument("--poses", required=True, help="CSV written by localize")
    p.add_argument("--out", required=True, help="output completed-map JSON")
    p.set_defaults(func=cmd_complete, primary="completion")

    p = sub.add_parser("augment", parents=[common], help="reproject ego and objects onto the completed map")
    p.add_argument("--frames", required=True, help="frames JSON")
    p.add_argument("--objects", help="object boxes JSON (ego frame); optional")
    p.add_argument("--map", required=True, help="global map JSON or output of complete")
    p.add_argument("--poses", required=True, help="CSV written by localize")
    p.add_argument("--out", required=True, help="output augmented-frames JSON")
    p.set_defaults(func=cmd_augment, primary="completion")

    p = sub.add_parser("bench", parents=[common], help="end-to-end benchmark over seeds, alphas and methods")
    p.add_argument("--spec", default="default", help="scenario JSON or 'default'")
    p.add_argument("--alpha", type=lambda s: _csv_list(s, float), help="comma-separated alphas (default 1,2,3)")
    p.add_argument("--methods", type=lambda s: _csv_list(s, str), help="comma-separated subset of gnss,icp,ndt,ours")
    p.add_argument("--seeds", type=int, help="number of seeds, starting at the scenario seed (default 20)")
    p.add_argument("--frames", type=lambda s: _csv_list(s, int), help="evaluation frame indices (default 4,10,16)")
    p.add_argument("--out", default="bench_out", help="report directory")
    p.set_defaults(func=cmd_bench, primary="bench")

    p = sub.add_parser("report", parents=[common], help="aggregate raw bench rows into tables and charts")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="bench directories or raw row CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report, primary="bench")
    return ap


def _fail(code: int, exc: BaseException, context: Optional[dict] = None) -> int:
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if context:
        report["context"] = context
    sys.stderr.write(json.dumps(report, sort_keys=True) + "\n")
    return code


def main(argv: Optional[list[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.cfg, args.primary)
        return args.func(args, cfg)
    except CliError as e:
        return _fail(e.code, e, e.context)
    except NonConvergence as e:
        return _fail(EXIT_NUMERIC, e)
    except NUMERIC_ERRORS as e:
        return _fail(EXIT_NUMERIC, e)
    except INPUT_ERRORS as e:
        return _fail(EXIT_INPUT, e)
    except LgfaError as e:
        return _fail(EXIT_NUMERIC, e)


if __name__ == "__main__":
    sys.exit(main())
