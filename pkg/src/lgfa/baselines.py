"""Class-blind reference registrars: trimmed point-to-point ICP and single-grid 2D NDT."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, InsufficientInput
from .geom import PointIndex
from .localization import pose_diff, weighted_procrustes
from .map_model import Pose2D


def icp_trimmed(src, dst, theta0: Pose2D = Pose2D(), iters: int = 20, radius: float = 2.0,
                trim: float = 0.7, eps: float = 1e-4, lam: float = 5.0) -> Pose2D:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or len(dst) < 3:
        raise InsufficientInput("trimmed ICP needs >= 3 points on each side")
    index = PointIndex(dst)
    theta = theta0
    for _ in range(iters):
        d, j = index.nearest(theta.apply(src), radius=radius)
        ok = np.nonzero(np.isfinite(d))[0]
        if len(ok) < 3:
            break
        n_keep = max(3, int(math.floor(trim * len(ok))))
        order = ok[np.argsort(d[ok], kind="stable")[:n_keep]]
        try:
            new = weighted_procrustes(src[order], dst[j[order]], np.ones(len(order)))
        except DegenerateGeometry:
            break
        step = pose_diff(new, theta, lam)
        theta = new
        if step < eps:
            break
    return theta


def _cell_code(keys: np.ndarray) -> np.ndarray:
    # pack (i, j) into one int64; grids here are far below 2**31 cells per axis
    return (keys[:, 0].astype(np.int64) << 32) + (keys[:, 1].astype(np.int64) & 0xFFFFFFFF)


@dataclass
class NdtGrid:
    """Per-cell Gaussians over the target cloud (cells with < 5 points dropped)."""

    res: float
    codes: np.ndarray  # sorted packed cell keys
    mu: np.ndarray  # (C, 2)
    icov: np.ndarray  # (C, 2, 2)

    @classmethod
    def build(cls, dst, res: float = 1.0, min_pts: int = 5, reg: float = 1e-3) -> "NdtGrid":
        dst = np.asarray(dst, dtype=np.float64)
        codes = _cell_code(np.floor(dst / res).astype(np.int64))
        order = np.argsort(codes, kind="stable")
        codes, pts = codes[order], dst[order]
        uniq, start, count = np.unique(codes, return_index=True, return_counts=True)
        keep_codes, mus, icovs = [], [], []
        for code, a, n in zip(uniq, start, count):
            if n < min_pts:
                continue
            grp = pts[a:a + n]
            cov = np.cov(grp.T, bias=False) + reg * np.eye(2)
            keep_codes.append(code)
            mus.append(grp.mean(axis=0))
            icovs.append(np.linalg.inv(cov))
        if not keep_codes:
            raise InsufficientInput("no NDT cell holds >= 5 target points")
        return cls(res, np.array(keep_codes, dtype=np.int64), np.array(mus), np.array(icovs))

    def __len__(self):
        return len(self.codes)

    def lookup(self, q: np.ndarray):
        """Cell mean / inverse covariance per point; mask of points in a valid cell."""
        code = _cell_code(np.floor(q / self.res).astype(np.int64))
        k = np.minimum(np.searchsorted(self.codes, code), len(self.codes) - 1)
        ok = self.codes[k] == code
        mu = np.where(ok[:, None], self.mu[k], 0.0)
        icov = np.where(ok[:, None, None], self.icov[k], 0.0)
        return mu, icov, ok


def _rot(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]]), np.array([[-s, -c], [c, -s]])


def ndt_score(grid: NdtGrid, src: np.ndarray, theta: Pose2D, assign=None) -> float:
    """Sum of exp(-q' S^-1 q / 2) with q = T(x) - mu of the point's cell.

    `assign` freezes the cell assignment (mu, icov, ok) so the score is smooth
    in the pose, which is what the finite-difference check needs.
    """
    q = theta.apply(src)
    mu, icov, ok = grid.lookup(q) if assign is None else assign
    d = q - mu
    m = np.einsum("ni,nij,nj->n", d, icov, d)
    return float(np.sum(np.where(ok, np.exp(-0.5 * m), 0.0)))


def ndt_gradient(grid: NdtGrid, src: np.ndarray, theta: Pose2D, assign=None):
    """Score, analytic 3-vector Jacobian and Gauss-Newton normal matrix."""
    R, dR = _rot(theta.phi)
    q = src @ R.T + theta.t
    mu, icov, ok = grid.lookup(q) if assign is None else assign
    d = q - mu
    Sd = np.einsum("nij,nj->ni", icov, d)
    e = np.where(ok, np.exp(-0.5 * np.einsum("ni,ni->n", d, Sd)), 0.0)
    # dq/dtheta columns: e_x, e_y, dR x
    Jphi = src @ dR.T
    J = np.zeros((len(src), 2, 3))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, :, 2] = Jphi
    grad = -np.einsum("n,ni,nik->k", e, Sd, J)
    H = np.einsum("n,nik,nij,njl->kl", e, J, icov, J)
    return float(e.sum()), grad, H, (mu, icov, ok)


def ndt_2d(src, dst, theta0: Pose2D = Pose2D(), iters: int = 20, grid: float = 1.0,
           max_src: int = 8000, eps: float = 1e-4, lam: float = 5.0) -> Pose2D:
    """Gauss-Newton ascent of the NDT score with step halving (<= 10 per iteration)."""
    src = np.asarray(src, dtype=np.float64)
    if len(src) > max_src:
        src = src[:: math.ceil(len(src) / max_src)]
    g = NdtGrid.build(dst, grid)
    theta = theta0
    score = ndt_score(g, src, theta)
    for _ in range(iters):
        _, grad, H, _ = ndt_gradient(g, src, theta)
        try:
            step = np.linalg.solve(H + 1e-9 * np.eye(3), grad)
        except np.linalg.LinAlgError:
            break
        lam_s = 1.0
        accepted = False
        for _ in range(11):
            cand = Pose2D(theta.tx + lam_s * step[0], theta.ty + lam_s * step[1], theta.phi + lam_s * step[2])
            sc = ndt_score(g, src, cand)
            if sc >= score:
                accepted = True
                break
            lam_s *= 0.5
        if not accepted:
            break
        moved = pose_diff(cand, theta, lam)
        theta, score = cand, sc
        if moved < eps:
            break
    return theta
