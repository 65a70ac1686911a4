"""Map-quality, localization and completion metrics plus table/figure writers."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.optimize import least_squares

from .baselines import icp_trimmed
from .errors import ClassAbsent, DegenerateScale, EmptyAggregate, InsufficientInput
from .geom import CLASSES, PointIndex, SegmentIndex, SemanticClass, directed_distance, resample
from .map_model import Pose2D, wrap_angle


# chamfer ------------------------------------------------------------------------

def _class_polys(m, c: SemanticClass) -> list[np.ndarray]:
    return [p.pts for p in m.polylines(c)]


def _samples(polys: list[np.ndarray], step: float) -> np.ndarray:
    return np.vstack([resample(p, step) for p in polys])


def chamfer_class(pred, gt, c: SemanticClass, step: float = 0.2) -> float:
    P, G = _class_polys(pred, c), _class_polys(gt, c)
    if not P or not G:
        raise ClassAbsent(f"class {c.value} missing from {'prediction' if not P else 'ground truth'}")
    sp, sg = _samples(P, step), _samples(G, step)
    return 0.5 * (directed_distance(sp, sg) + directed_distance(sg, sp))


def chamfer_map(pred, gt, step: float = 0.2) -> dict[SemanticClass, float]:
    """Symmetric pooled Chamfer per class; classes absent on either side are skipped."""
    out = {}
    for c in CLASSES:
        try:
            out[c] = chamfer_class(pred, gt, c, step)
        except ClassAbsent:
            continue
    return out


# scale error --------------------------------------------------------------------

def _pca_angle(X: np.ndarray) -> float:
    C = np.cov((X - X.mean(0)).T)
    w, v = np.linalg.eigh(C)
    e = v[:, int(np.argmax(w))]
    return math.atan2(e[1], e[0])


def rigid_prealign(P: list[np.ndarray], G: list[np.ndarray], step: float = 0.2) -> Pose2D:
    """Class-blind trimmed ICP from the best of identity and PCA-based starts."""
    sp, sg = _samples(P, step), _samples(G, step)
    cp, cg = sp.mean(0), sg.mean(0)
    starts = [Pose2D()]
    base = _pca_angle(sg) - _pca_angle(sp)
    for flip in (0.0, math.pi):
        R = Pose2D(0.0, 0.0, base + flip)
        t = cg - R.apply(cp)
        starts.append(Pose2D(t[0], t[1], base + flip))
    best, best_f = None, math.inf
    for s0 in starts:
        T = icp_trimmed(sp, sg, s0, iters=30)
        f = directed_distance(T.apply(sp), sg)
        if f < best_f - 1e-12:
            best, best_f = T, f
    return best


def _seg_index(polys: list[np.ndarray]) -> SegmentIndex:
    return SegmentIndex(np.vstack([p[:-1] for p in polys]), np.vstack([p[1:] for p in polys]))


def _similarity(x, c: np.ndarray):
    """Map for parameters (log k, tx, ty, phi) scaling/rotating about c, and its inverse."""
    k = math.exp(x[0])
    R = Pose2D(0.0, 0.0, x[3]).R
    t = np.array([x[1], x[2]])
    fwd = lambda p: c + k * (p - c) @ R.T + t
    inv = lambda q: c + ((q - c - t) @ R) / k
    return k, fwd, inv


def similarity_fit(P: list[np.ndarray], G: list[np.ndarray], step: float = 0.2, gate: float = 1.0):
    """Robust similarity (k, fwd) bringing P onto G; residuals are sample-to-polyline distances."""
    sp, sg = _samples(P, step), _samples(G, step)
    gi, pi = _seg_index(G), _seg_index(P)
    c = sp.mean(0)
    cap = 5.0 * gate  # far samples only need to be known as far
    memo = {}

    def parts(x):
        key = x.tobytes()
        if key not in memo:  # resid and jac are evaluated at the same points
            k, fwd, inv = _similarity(x, c)
            q, u = fwd(sp), inv(sg)
            d1, _, f1 = gi.nearest(q, radius=cap)
            d2, _, f2 = pi.nearest(u, radius=cap / k)
            memo.clear()
            memo[key] = (k, q, u, d1, f1, k * d2, f2)
        return memo[key]

    def resid(x):
        _, _, _, d1, _, d2, _ = parts(x)
        return np.concatenate([np.minimum(d1, cap), np.minimum(d2, cap)])

    def jac(x):
        k, q, u, d1, f1, d2, f2 = parts(x)
        R = Pose2D(0.0, 0.0, x[3]).R
        dR = np.array([[-R[1, 0], -R[0, 0]], [R[0, 0], -R[1, 0]]])
        t = np.array([x[1], x[2]])
        J = np.zeros((len(sp) + len(sg), 4))
        # forward: q = c + k R (p - c) + t
        ok = np.isfinite(d1) & (d1 < cap) & (d1 > 0)
        n = np.zeros_like(q)
        n[ok] = (q[ok] - f1[ok]) / d1[ok, None]
        pc = sp - c
        J[: len(sp), 0] = np.einsum("ni,ni->n", n, k * pc @ R.T)
        J[: len(sp), 1:3] = n
        J[: len(sp), 3] = np.einsum("ni,ni->n", n, k * pc @ dR.T)
        # inverse: r = k |u - foot|, u = c + R^T (g - c - t) / k
        ok = np.isfinite(d2) & (d2 < cap) & (d2 > 0)
        m = np.zeros_like(u)
        m[ok] = (u[ok] - f2[ok]) / (d2[ok, None] / k)
        w = sg - c - t
        du_dlogk = -(u - c)
        J[len(sp):, 0] = np.where(ok, d2, 0.0) + k * np.einsum("ni,ni->n", m, du_dlogk)
        J[len(sp):, 1:3] = -(m @ R.T)  # k * m . (-R^T / k)
        J[len(sp):, 3] = np.einsum("ni,ni->n", m, w @ dR)
        return J

    sol = least_squares(resid, np.zeros(4), jac=jac, loss="soft_l1", f_scale=gate,
                        x_scale=[0.01, 0.1, 0.1, 0.01], xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=200)
    k, fwd, _ = _similarity(sol.x, c)
    return k, fwd


def _mutual_pairs(X: np.ndarray, Y: np.ndarray, gate: float):
    dxy, jy = PointIndex(Y).nearest(X, radius=gate)
    dyx, ix = PointIndex(X).nearest(Y, radius=gate)
    i = np.nonzero(np.isfinite(dxy))[0]
    mutual = ix[jy[i]] == i
    return i[mutual], jy[i[mutual]]


def scale_factor(pred, gt, step: float = 0.2, classes: Optional[Iterable[SemanticClass]] = None,
                 pair_gate: float = 1.0) -> float:
    """Scale s with pred ~ s * gt after similarity alignment."""
    classes = list(CLASSES if classes is None else classes)
    P = [p for c in classes for p in _class_polys(pred, c)]
    G = [g for c in classes for g in _class_polys(gt, c)]
    if not P or not G:
        raise ClassAbsent("no shared geometry for scale estimation")
    sg = _samples(G, step)
    try:
        T = rigid_prealign(P, G, step)
    except InsufficientInput as e:
        raise DegenerateScale(f"too few samples to align: {e}") from None
    P = [T.apply(p) for p in P]
    k, fwd = similarity_fit(P, G, step, pair_gate)
    sp = _samples(P, step)
    sq = fwd(sp)
    # pairs come from the similarity-aligned samples; the scale itself is the closed form
    # s = sum x'y' / sum x'x' over centred gt x' and rigidly aligned pred y'
    i, j = _mutual_pairs(sq, sg, pair_gate)
    if len(i) < 3:
        raise DegenerateScale(f"only {len(i)} mutual pairs within {pair_gate} m")
    y = sp[i]  # rigidly aligned, unscaled pred
    x = sg[j]
    xc, yc = x - x.mean(0), y - y.mean(0)
    den = float(np.sum(xc * xc))
    if den <= 1e-12:
        raise DegenerateScale("scale pairs collapse to a point")
    return float(np.sum(xc * yc)) / den


def scale_error(pred, gt, step: float = 0.2, classes=None) -> float:
    """|1 - s| * 100 (percent)."""
    return abs(1.0 - scale_factor(pred, gt, step, classes)) * 100.0


# localization errors ---------------------------------------------------------------

def pose_errors(est: Pose2D, true: Pose2D) -> tuple[float, float]:
    rel = est.inverse().compose(true)
    return math.hypot(rel.tx, rel.ty), abs(math.degrees(wrap_angle(rel.phi)))


# aggregation ----------------------------------------------------------------------

def nearest_rank(values, p: float) -> float:
    v = sorted(values)
    if not v:
        raise EmptyAggregate("percentile of an empty sample")
    r = max(1, math.ceil(p / 100.0 * len(v) - 1e-12))
    return float(v[r - 1])


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    median: float
    p90: float

    @classmethod
    def of(cls, values) -> "Summary":
        v = [float(x) for x in values]
        if not v:
            raise EmptyAggregate("no samples to summarise")
        return cls(len(v), float(np.mean(v)), nearest_rank(v, 50), nearest_rank(v, 90))


@dataclass(frozen=True)
class MapQualityStats:
    cls: SemanticClass
    n: int
    chamfer: Summary
    scale_error: Summary


def map_quality(per_scene: list[dict]) -> list[MapQualityStats]:
    """Rows {"class", "chamfer", "scale_error"} per scene and class -> per-class stats."""
    out = []
    for c in CLASSES:
        rows = [r for r in per_scene if r["class"] == c]
        if not rows:
            continue
        out.append(MapQualityStats(c, len(rows), Summary.of(r["chamfer"] for r in rows),
                                   Summary.of(r["scale_error"] for r in rows)))
    return out


def nested_mean(rows: list[dict], value: str, frame_key=("seed", "frame")) -> float:
    """Mean over frames of the per-frame mean over perturbations."""
    if not rows:
        raise EmptyAggregate(f"no rows to aggregate for {value}")
    per_frame = defaultdict(list)
    for r in rows:
        per_frame[tuple(r[k] for k in frame_key)].append(r[value])
    return float(np.mean([np.mean(v) for _, v in sorted(per_frame.items())]))


@dataclass(frozen=True)
class LocErrorStats:
    alpha: float
    method: str
    trans_mean: float
    head_mean: float
    n_frames: int


def loc_stats(rows: list[dict]) -> list[LocErrorStats]:
    """Rows {alpha, method, seed, frame, k, trans, head} -> one entry per (alpha, method)."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["alpha"], r["method"])].append(r)
    out = []
    for (a, m), g in sorted(groups.items(), key=lambda kv: (kv[0][0], _method_rank(kv[0][1]))):
        frames = {(r["seed"], r["frame"]) for r in g}
        out.append(LocErrorStats(a, m, nested_mean(g, "trans"), nested_mean(g, "head"), len(frames)))
    return out


METHOD_ORDER = ("gnss", "icp", "ndt", "ours")


def _method_rank(m: str) -> tuple:
    return (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m)


def completion_table(rows: list[dict]) -> list[dict]:
    """Rows {seed, frame, variant, class, rate} -> mean rate per (variant, class)."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["variant"], r["class"])].append(r["rate"])
    if not groups:
        raise EmptyAggregate("no completion rows")
    cidx = {c: i for i, c in enumerate(CLASSES)}
    return [{"variant": v, "class": c, "n": len(x), "rate_mean": float(np.mean(x)), "rate_min": float(min(x))}
            for (v, c), x in sorted(groups.items(), key=lambda kv: (kv[0][0], cidx[kv[0][1]]))]


# writers ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, SemanticClass):
        return x.value
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def csv_text(header: list[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def map_quality_csv(stats: list[MapQualityStats]) -> str:
    return csv_text(
        ["class", "n", "chamfer_mean", "chamfer_median", "chamfer_p90",
         "scale_err_mean", "scale_err_median", "scale_err_p90"],
        [[s.cls, s.n, s.chamfer.mean, s.chamfer.median, s.chamfer.p90,
          s.scale_error.mean, s.scale_error.median, s.scale_error.p90] for s in stats])


def loc_errors_csv(stats: list[LocErrorStats]) -> str:
    return csv_text(["alpha", "method", "trans_err_mean_m", "head_err_mean_deg", "frames"],
                    [[float(s.alpha), s.method, s.trans_mean, s.head_mean, s.n_frames] for s in stats])


def completion_csv(table: list[dict]) -> str:
    return csv_text(["variant", "class", "n", "rate_mean_pct", "rate_min_pct"],
                    [[r["variant"], r["class"], r["n"], r["rate_mean"], r["rate_min"]] for r in table])


# SVG charts --------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd")


def _svg(w: int, h: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{w}" height="{h}" fill="white"/>', *body, "</svg>"]) + "\n"


def line_chart_svg(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
                   w: int = 480, h: int = 320) -> str:
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise EmptyAggregate("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = max(ys) * 1.1 if max(ys) > 0 else 1.0
    L, R, T, B = 60, 110, 30, 40
    px = lambda x: L + (x - x0) / (x1 - x0) * (w - L - R)
    py = lambda y: h - B - y / y1 * (h - T - B)
    body = [f'<text x="{w / 2:.1f}" y="18" text-anchor="middle">{title}</text>',
            f'<line x1="{L}" y1="{h - B}" x2="{w - R}" y2="{h - B}" stroke="black"/>',
            f'<line x1="{L}" y1="{T}" x2="{L}" y2="{h - B}" stroke="black"/>',
            f'<text x="{(L + w - R) / 2:.1f}" y="{h - 8}" text-anchor="middle">{xlabel}</text>',
            f'<text x="14" y="{(T + h - B) / 2:.1f}" transform="rotate(-90 14 {(T + h - B) / 2:.1f})" '
            f'text-anchor="middle">{ylabel}</text>']
    for x in sorted(set(xs)):
        body.append(f'<text x="{px(x):.1f}" y="{h - B + 14}" text-anchor="middle">{x:g}</text>')
    for k in range(5):
        y = y1 * k / 4
        body.append(f'<text x="{L - 4}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.2f}</text>')
    for n, (name, s) in enumerate(series.items()):
        col = _PALETTE[n % len(_PALETTE)]
        s = sorted(s)
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in s)
        body.append(f'<polyline points="{path}" fill="none" stroke="{col}" stroke-width="2"/>')
        for x, y in s:
            body.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{col}"/>')
        body.append(f'<text x="{w - R + 8}" y="{T + 14 * n + 10}" fill="{col}">{name}</text>')
    return _svg(w, h, body)


def bar_chart_svg(groups: dict[str, dict[str, float]], title: str, ylabel: str, w: int = 480,
                  h: int = 320, ymax: float = 100.0) -> str:
    """Grouped bars: groups[category][variant] = value."""
    cats = list(groups)
    if not cats:
        raise EmptyAggregate("nothing to plot")
    variants = sorted({v for g in groups.values() for v in g})
    L, R, T, B = 50, 110, 30, 40
    gw = (w - L - R) / len(cats)
    bw = gw * 0.8 / max(1, len(variants))
    py = lambda y: h - B - min(y, ymax) / ymax * (h - T - B)
    body = [f'<text x="{w / 2:.1f}" y="18" text-anchor="middle">{title}</text>',
            f'<line x1="{L}" y1="{h - B}" x2="{w - R}" y2="{h - B}" stroke="black"/>',
            f'<text x="14" y="{(T + h - B) / 2:.1f}" transform="rotate(-90 14 {(T + h - B) / 2:.1f})" '
            f'text-anchor="middle">{ylabel}</text>']
    for i, c in enumerate(cats):
        gx = L + i * gw + 0.1 * gw
        body.append(f'<text x="{L + (i + 0.5) * gw:.1f}" y="{h - B + 14}" text-anchor="middle">{c}</text>')
        for j, v in enumerate(variants):
            if v not in groups[c]:
                continue
            val = groups[c][v]
            body.append(f'<rect x="{gx + j * bw:.1f}" y="{py(val):.1f}" width="{bw:.1f}" '
                        f'height="{h - B - py(val):.1f}" fill="{_PALETTE[j % len(_PALETTE)]}"/>')
    for j, v in enumerate(variants):
        body.append(f'<text x="{w - R + 8}" y="{T + 14 * j + 10}" fill="{_PALETTE[j % len(_PALETTE)]}">{v}</text>')
    return _svg(w, h, body)
