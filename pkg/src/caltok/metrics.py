"""Evaluation metrics: pose accuracy, trajectory error, depth, point maps and field of view.

All functions are pure. ``MetricReport`` keeps the 15 metrics in a fixed column order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, fields, astuple
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import rays_fov
from .geometry import CameraPose, relative_pose, rotation_angle

POSE_TAU = 15.0
AUC_POSE_MAX = 30.0
AUC_FOV_MAX = 10.0
DELTA1 = 1.25


class DegenerateAlignment(ValueError):
    """Correspondences do not pin down a similarity (fewer than 3 or collinear points)."""


@dataclass(frozen=True)
class SimilarityTransform:
    s: float
    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.s * (pts @ self.R.T) + self.t

    def inverse(self) -> "SimilarityTransform":
        Ri = self.R.T
        return SimilarityTransform(1.0 / self.s, Ri, -(Ri @ self.t) / self.s)


@dataclass
class MetricReport:
    RRA: float
    RTA: float
    AUC30: float
    ATE: float
    RPEt: float
    RPEr: float
    Rel: float
    RMSE: float
    delta1: float
    Acc: float
    Comp: float
    CD: float
    hErr: float
    vErr: float
    AUC_FoV: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> tuple[float, ...]:
        return astuple(self)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.columns(), self.values()))

    @classmethod
    def mean(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("no reports to aggregate")
        return cls(*np.mean([r.values() for r in reports], axis=0).tolist())


# ---------------------------------------------------------------------------
# poses


def _pair_errors(pred: Sequence[CameraPose], gt: Sequence[CameraPose]) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation-direction errors (degrees) over all ordered frame pairs."""
    if len(pred) != len(gt):
        raise ValueError("pose lists differ in length")
    if len(gt) < 2:
        raise ValueError("need at least 2 frames")
    rot, trans = [], []
    for i in range(len(gt)):
        for j in range(len(gt)):
            if i == j:
                continue
            rp, rg = relative_pose(pred[i], pred[j]), relative_pose(gt[i], gt[j])
            rot.append(math.degrees(float(rotation_angle(rg.R.T @ rp.R))))
            trans.append(_direction_error(rp.t, rg.t))
    return np.array(rot), np.array(trans)


def _direction_error(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps and nb < eps:
        return 0.0
    if na < eps or nb < eps:
        return 90.0
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def pose_angular(pred, gt, tau: float = POSE_TAU) -> tuple[float, float]:
    rot, trans = _pair_errors(pred, gt)
    return float(np.mean(rot <= tau)), float(np.mean(trans <= tau))


def _step_auc(errors: Sequence[np.ndarray], max_tau: float) -> float:
    """Exact (1/max_tau)·∫_0^max_tau min_k frac(errors_k ≤ τ) dτ for step functions."""
    pts = np.unique(np.concatenate([np.clip(e, 0.0, max_tau) for e in errors] + [[0.0, max_tau]]))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        # on (a, b) each fraction is constant: errors ≤ a count
        frac = min(float(np.mean(e <= a)) for e in errors)
        total += frac * (b - a)
    return total / max_tau


def auc_pose(pred, gt, max_tau: float = AUC_POSE_MAX) -> float:
    rot, trans = _pair_errors(pred, gt)
    return _step_auc([rot, trans], max_tau)


def _centers(poses) -> np.ndarray:
    return np.stack([p.t for p in poses])


def trajectory(pred, gt) -> tuple[float, float, float]:
    """(ATE, RPEt, RPEr) after similarity alignment of camera centres."""
    if len(pred) != len(gt) or len(gt) < 2:
        raise ValueError("need two equally long trajectories of at least 2 frames")
    cp, cg = _centers(pred), _centers(gt)
    sim = umeyama(cp, cg, strict=False)
    ate = math.sqrt(float(np.mean(np.sum((sim.apply(cp) - cg) ** 2, axis=1))))
    et, er = [], []
    for i in range(len(gt) - 1):
        rp, rg = relative_pose(pred[i], pred[i + 1]), relative_pose(gt[i], gt[i + 1])
        et.append(np.linalg.norm(sim.s * rp.t - rg.t))
        er.append(math.degrees(float(rotation_angle(rg.R.T @ rp.R))))
    rms = lambda x: math.sqrt(float(np.mean(np.square(x))))
    return ate, rms(et), rms(er)


# ---------------------------------------------------------------------------
# depth


def scale_shift_fit(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Least-squares (a, b) minimising Σ (a·pred + b − gt)²."""
    A = np.stack([pred, np.ones_like(pred)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, gt, rcond=None)
    return float(a), float(b)


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> tuple[float, float, float]:
    """(Rel, RMSE, δ1) after one scale and shift over all valid pixels of a sequence."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    valid = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("no valid pixels")
    d, g = pred[valid], gt[valid]
    if np.any(g <= 0):
        raise ValueError("ground-truth depth must be positive on valid pixels")
    a, b = scale_shift_fit(d, g)
    d = a * d + b
    rel = float(np.mean(np.abs(d - g) / g))
    rmse = math.sqrt(float(np.mean((d - g) ** 2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d / g, g / d)
    delta = float(np.mean((d > 0) & (ratio < DELTA1)))
    return rel, rmse, delta


# ---------------------------------------------------------------------------
# alignment and point maps


def umeyama(src: np.ndarray, dst: np.ndarray, strict: bool = True) -> SimilarityTransform:
    """Least-squares similarity taking ``src`` onto ``dst`` (N x 3 each).

    With ``strict`` a rank-deficient configuration raises; otherwise the
    closed form is used as is and a zero-spread source falls back to scale 1.
    """
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("need matching (N, 3) correspondences")
    n = len(src)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = float(np.sum(xs * xs)) / n
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    if strict and (n < 3 or np.linalg.matrix_rank(xs, tol=1e-9 * max(1.0, np.abs(xs).max())) < 2):
        raise DegenerateAlignment("fewer than 3 non-collinear points")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 1e-15 else 1.0
    if s <= 0:
        s = 1.0
    return SimilarityTransform(s, R, mu_d - s * R @ mu_s)


def _rigid_fit(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu_s, mu_d = src.mean(0), dst.mean(0)
    U, _, Vt = np.linalg.svd((dst - mu_d).T @ (src - mu_s))
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


@dataclass
class IcpResult:
    transform: SimilarityTransform
    residuals: list[float]

    @property
    def iterations(self) -> int:
        return len(self.residuals) - 1


def icp_refine(src: np.ndarray, dst: np.ndarray, init: SimilarityTransform | None = None,
               max_iters: int = 30, tol: float = 1e-9) -> IcpResult:
    """Point-to-point ICP; rigid updates on top of ``init`` so its scale is kept.

    A step is only accepted if it lowers the mean nearest-neighbour
    distance, so ``residuals`` never increases.
    """
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("empty point cloud")
    init = init or SimilarityTransform.identity()
    tree = cKDTree(dst)
    cur = init
    moved = cur.apply(src)
    dist, idx = tree.query(moved)
    residuals = [float(dist.mean())]
    for _ in range(max_iters):
        R, t = _rigid_fit(moved, dst[idx])
        cand = SimilarityTransform(cur.s, R @ cur.R, R @ cur.t + t)
        moved_c = cand.apply(src)
        dist_c, idx_c = tree.query(moved_c)
        res = float(dist_c.mean())
        if res > residuals[-1]:
            break
        improvement = residuals[-1] - res
        cur, moved, idx = cand, moved_c, idx_c
        residuals.append(res)
        if improvement < tol:
            break
    return IcpResult(cur, residuals)


def chamfer(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(Acc, Comp, CD) for already aligned clouds."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty point cloud")
    acc = float(cKDTree(gt).query(pred)[0].mean())
    comp = float(cKDTree(pred).query(gt)[0].mean())
    return acc, comp, 0.5 * (acc + comp)


def point_metrics(pred: np.ndarray, gt: np.ndarray, max_iters: int = 30) -> tuple[float, float, float]:
    """Align corresponding (N, 3) point maps with Umeyama then ICP and measure Acc/Comp/CD."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty point cloud")
    init = umeyama(pred, gt, strict=False) if pred.shape == gt.shape else SimilarityTransform.identity()
    res = icp_refine(pred, gt, init, max_iters=max_iters)
    return chamfer(res.transform.apply(pred), gt)


# ---------------------------------------------------------------------------
# field of view


def fov_metrics(pred_rays: Sequence[np.ndarray], gt_rays: Sequence[np.ndarray],
                gt_valid: Sequence[np.ndarray] | None = None) -> tuple[float, float, float]:
    """(hErr, vErr, AUC_FoV) in degrees from per-frame (H, W, 3) ray maps.

    Both sides go through the same border-mean extractor, so rays taken
    straight from the ground-truth camera score exactly (0, 0, 1).
    """
    if len(pred_rays) == 0:
        raise ValueError("need at least one frame")
    he, ve = [], []
    for f, (pr, gr) in enumerate(zip(pred_rays, gt_rays)):
        valid = None if gt_valid is None else gt_valid[f]
        ph, pv = rays_fov(pr, valid)
        gh, gv = rays_fov(gr, valid)
        he.append(abs(ph - gh))
        ve.append(abs(pv - gv))
    he, ve = np.array(he), np.array(ve)
    auc = _step_auc([np.maximum(he, ve)], AUC_FOV_MAX)
    return float(np.median(he)), float(np.median(ve)), auc


# ---------------------------------------------------------------------------
# whole-sequence report


def max_points_subsample(n: int, limit: int) -> np.ndarray:
    return np.arange(n) if n <= limit else np.linspace(0, n - 1, limit).round().astype(int)


def sequence_report(pred: dict, gt: dict, tau: float = POSE_TAU, max_points: int = 20000) -> MetricReport:
    """All 15 metrics for one sequence.

    ``pred`` and ``gt`` hold ``rays`` (S,H,W,3), ``depth`` (S,H,W), ``R``
    (S,3,3) and ``t`` (S,3); ``gt`` also holds ``valid`` (S,H,W). Point maps
    live in the first frame's coordinates.
    """
    valid = gt["valid"]
    S = len(gt["R"])
    pp = [CameraPose(pred["R"][s], pred["t"][s]) for s in range(S)]
    gp = [CameraPose(gt["R"][s], gt["t"][s]) for s in range(S)]
    if S >= 2:
        rra, rta = pose_angular(pp, gp, tau)
        auc = auc_pose(pp, gp)
        ate, rpet, rper = trajectory(pp, gp)
    else:
        rra = rta = auc = 1.0
        ate = rpet = rper = 0.0
    rel, rmse, d1 = depth_metrics(pred["depth"], gt["depth"], valid)
    pts_p = _world_points(pred, pp, valid)
    pts_g = _world_points(gt, gp, valid)
    keep = max_points_subsample(len(pts_g), max_points)
    acc, comp, cd = point_metrics(pts_p[keep], pts_g[keep])
    # camera rays exist on sky pixels too; only pixels outside the lens model lack them
    ray_ok = np.linalg.norm(gt["rays"], axis=-1) > 0.5
    h, v, afov = fov_metrics(pred["rays"], gt["rays"], ray_ok)
    return MetricReport(rra, rta, auc, ate, rpet, rper, rel, rmse, d1, acc, comp, cd, h, v, afov)


def _world_points(d: dict, poses: Sequence[CameraPose], valid: np.ndarray) -> np.ndarray:
    ref = poses[0].inverse()
    out = []
    for s, pose in enumerate(poses):
        local = d["rays"][s][valid[s]] * d["depth"][s][valid[s]][:, None]
        out.append(ref.compose(pose).apply(local))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# serialisation


def write_reports_csv(path, rows: Sequence[tuple[dict, MetricReport]]) -> None:
    """One row per sequence; leading key columns come from each row's dict."""
    path = Path(path)
    keys = list(rows[0][0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + MetricReport.columns())
        for key, rep in rows:
            w.writerow([key[k] for k in keys] + [f"{v:.10g}" for v in rep.values()])


def read_reports_csv(path) -> list[tuple[dict, MetricReport]]:
    cols = MetricReport.columns()
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = {k: v for k, v in row.items() if k not in cols}
            out.append((key, MetricReport(*(float(row[c]) for c in cols))))
    return out


def write_aggregate_json(path, groups: dict[str, MetricReport]) -> None:
    Path(path).write_text(json.dumps({k: r.as_dict() for k, r in groups.items()}, indent=2))
