"""Pinhole and Kannala-Brandt fisheye cameras, and dense-map warping between them.

Pixel coordinates are continuous: the image spans ``[0, width] x [0, height]``
and pixel ``(row i, col j)`` has its centre at ``(j + 0.5, i + 0.5)``.
Camera coordinates are x right, y down, z forward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Union

import numpy as np

from .nncore import Tensor, resample

THETA_LIMIT = math.radians(120.0)
_THETA_GRID_STEP = 1e-3


class OutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    model = "pinhole"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (..., 3) directions; returns (uv, on-image mask)."""
        d = np.asarray(dirs, dtype=np.float64)
        z = d[..., 2]
        front = z > 1e-12
        zs = np.where(front, z, 1.0)
        u = self.fx * d[..., 0] / zs + self.cx
        v = self.fy * d[..., 1] / zs + self.cy
        uv = np.stack([u, v], axis=-1)
        ok = front & _on_image(uv, self.width, self.height)
        uv[~front] = np.nan
        return uv, ok

    def unproject(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        uv = np.asarray(uv, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d, np.ones(d.shape[:-1], dtype=bool)

    def to_dict(self) -> dict:
        return {"model": self.model, **asdict(self)}


@dataclass(frozen=True)
class KannalaBrandtCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    theta_max: float = field(init=False, compare=False)

    model = "kannala_brandt"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "theta_max", monotone_limit(self.coeffs))

    @property
    def coeffs(self) -> tuple[float, float, float, float]:
        return (self.k1, self.k2, self.k3, self.k4)

    def radius(self, theta):
        return kb_radius(theta, self.coeffs)

    @property
    def r_max(self) -> float:
        return float(self.radius(self.theta_max))

    def project(self, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = np.asarray(dirs, dtype=np.float64)
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        rho = np.hypot(x, y)
        theta = np.arctan2(rho, z)
        in_range = theta <= self.theta_max
        r = self.radius(theta)
        safe = np.where(rho > 0, rho, 1.0)
        cos_a = np.where(rho > 0, x / safe, 0.0)
        sin_a = np.where(rho > 0, y / safe, 0.0)
        uv = np.stack([self.fx * cos_a * r + self.cx, self.fy * sin_a * r + self.cy], axis=-1)
        uv[~in_range] = np.nan
        return uv, in_range & _on_image(uv, self.width, self.height)

    def unproject(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        uv = np.asarray(uv, dtype=np.float64)
        mx = (uv[..., 0] - self.cx) / self.fx
        my = (uv[..., 1] - self.cy) / self.fy
        r = np.hypot(mx, my)
        ok = r <= self.r_max
        theta, _ = solve_theta(np.minimum(r, self.r_max), self.coeffs, self.theta_max)
        safe = np.where(r > 0, r, 1.0)
        s = np.sin(theta)
        d = np.stack([np.where(r > 0, s * mx / safe, 0.0),
                      np.where(r > 0, s * my / safe, 0.0),
                      np.cos(theta)], axis=-1)
        return d, ok

    def to_dict(self) -> dict:
        out = {"model": self.model}
        out.update({k: getattr(self, k) for k in
                    ("fx", "fy", "cx", "cy", "width", "height", "k1", "k2", "k3", "k4")})
        return out


Camera = Union[PinholeCamera, KannalaBrandtCamera]


def _on_image(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return ((uv[..., 0] >= 0) & (uv[..., 0] <= width)
                & (uv[..., 1] >= 0) & (uv[..., 1] <= height))


def kb_radius(theta, k):
    t2 = theta * theta
    return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))


def kb_radius_deriv(theta, k):
    t2 = theta * theta
    return 1.0 + t2 * (3 * k[0] + t2 * (5 * k[1] + t2 * (7 * k[2] + t2 * 9 * k[3])))


_GRID = np.minimum(np.arange(0.0, THETA_LIMIT + 0.5 * _THETA_GRID_STEP, _THETA_GRID_STEP), THETA_LIMIT)
# r'(theta) = 1 + [3 t^2, 5 t^4, 7 t^6, 9 t^8] . k on the grid
_DERIV_BASIS = np.stack([c * _GRID ** (2 * i + 2) for i, c in enumerate((3, 5, 7, 9))], axis=1)


def monotone_limit(k) -> float:
    """Largest grid angle <= 120 deg with r'(theta) > 0 on the whole grid below it."""
    bad = np.flatnonzero(1.0 + _DERIV_BASIS @ np.asarray(k, dtype=np.float64) <= 0)
    if bad.size == 0:
        return float(_GRID[-1])
    if bad[0] == 0:
        return 0.0
    return float(_GRID[bad[0] - 1])


def solve_theta(r: np.ndarray, k, theta_max: float, tol: float = 1e-14,
                max_iter: int = 60) -> tuple[np.ndarray, int]:
    """Invert r(theta) on [0, theta_max] by Newton steps guarded by a bisection bracket.

    Returns the angles and the number of iterations taken.
    """
    r = np.asarray(r, dtype=np.float64)
    lo = np.zeros_like(r)
    hi = np.full_like(r, theta_max)
    theta = np.clip(r, 0.0, theta_max)
    it = 0
    for it in range(1, max_iter + 1):
        f = kb_radius(theta, k) - r
        lo = np.where(f < 0, theta, lo)
        hi = np.where(f > 0, theta, hi)
        df = kb_radius_deriv(theta, k)
        step = f / np.where(df > 0, df, 1.0)
        cand = theta - step
        bad = (cand < lo) | (cand > hi) | (df <= 0)
        new = np.where(bad, 0.5 * (lo + hi), cand)
        delta = np.max(np.abs(new - theta), initial=0.0)
        theta = new
        if delta <= tol:
            break
    return theta, it


def kb_project(cam: KannalaBrandtCamera, direction) -> tuple[float, float]:
    """Project one unit direction; raises :class:`OutOfRangeError` past theta_max or off-image."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be unit length")
    uv, ok = cam.project(d[None])
    if not ok[0]:
        raise OutOfRangeError("direction projects outside the valid image region")
    return float(uv[0, 0]), float(uv[0, 1])


def kb_unproject(cam: KannalaBrandtCamera, pixel) -> np.ndarray:
    d, ok = cam.unproject(np.asarray(pixel, dtype=np.float64)[None])
    if not ok[0]:
        raise OutOfRangeError("pixel radius exceeds r(theta_max)")
    return d[0]


def pixel_centers(width: int, height: int) -> np.ndarray:
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([u, v], axis=-1)


@dataclass
class RayMap:
    dirs: np.ndarray
    valid: np.ndarray


@dataclass
class DenseMap:
    """Per-pixel channels (H, W, C) with a boolean validity mask (H, W)."""

    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def ray_map(cam: Camera) -> RayMap:
    d, ok = cam.unproject(pixel_centers(cam.width, cam.height))
    return RayMap(d, ok)


# ---------------------------------------------------------------------------
# sampling


def sample_distortion(rng: np.random.Generator, base: PinholeCamera,
                      max_tries: int = 1000) -> KannalaBrandtCamera:
    """Draw a fisheye camera around ``base``.

    Focal scale in [1, 1.2], principal point shift in [-10, 10] px,
    k1..k3 in (-0.5, 0.5) and k4 in (-0.05, 0.05). Draws whose monotone range
    cannot reach the midpoints of the image border are redrawn.
    """
    for _ in range(max_tries):
        scale = rng.uniform(1.0, 1.2)
        shift = rng.uniform(-10.0, 10.0, size=2)
        k = np.concatenate([rng.uniform(-0.5, 0.5, size=3), rng.uniform(-0.05, 0.05, size=1)])
        if np.any(np.abs(k[:3]) >= 0.5) or abs(k[3]) >= 0.05:
            continue
        cx = float(np.clip(base.cx + shift[0], 0.0, base.width - 1e-6))
        cy = float(np.clip(base.cy + shift[1], 0.0, base.height - 1e-6))
        cam = KannalaBrandtCamera(base.fx * scale, base.fy * scale, cx, cy,
                                  base.width, base.height, *map(float, k))
        if _covers_border(cam):
            return cam
    raise RuntimeError(f"no admissible distortion after {max_tries} draws")


def _covers_border(cam: KannalaBrandtCamera) -> bool:
    mids = np.array([[0.0, cam.height / 2], [cam.width, cam.height / 2],
                     [cam.width / 2, 0.0], [cam.width / 2, cam.height]])
    mx = (mids[:, 0] - cam.cx) / cam.fx
    my = (mids[:, 1] - cam.cy) / cam.fy
    return bool(np.all(np.hypot(mx, my) < cam.r_max)) and cam.theta_max > 0


def embed_pinhole(cam: PinholeCamera) -> KannalaBrandtCamera:
    """Same intrinsics as a zero-coefficient Kannala-Brandt camera (equidistant, not pinhole)."""
    return KannalaBrandtCamera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


# ---------------------------------------------------------------------------
# warping


@dataclass
class WarpPlan:
    """Bilinear gather from a source grid onto a destination grid."""

    index: np.ndarray   # (M, 4) flat source pixel indices
    weight: np.ndarray  # (M, 4)
    valid: np.ndarray   # (H_dst, W_dst)
    src_shape: tuple[int, int]

    def apply(self, values: np.ndarray) -> np.ndarray:
        h, w = self.valid.shape
        flat = values.reshape(-1, values.shape[-1]) if values.ndim == 3 else values.reshape(-1, 1)
        out = (flat[self.index] * self.weight[..., None]).sum(axis=1)
        out[~self.valid.reshape(-1)] = 0.0
        return out.reshape(h, w, -1) if values.ndim == 3 else out.reshape(h, w)

    def apply_tensor(self, values: Tensor) -> Tensor:
        """Differentiable variant; ``values`` is (H_src*W_src, C)."""
        return resample(values, self.index, self.weight)


def warp_plan(src_cam: Camera, dst_cam: Camera, src_valid: np.ndarray | None = None) -> WarpPlan:
    """For every destination pixel, where to read the source image."""
    dirs, ok_dst = dst_cam.unproject(pixel_centers(dst_cam.width, dst_cam.height))
    uv, ok_src = src_cam.project(dirs)
    return bilinear_plan(uv, ok_dst & ok_src, src_cam.width, src_cam.height, src_valid)


def bilinear_plan(uv: np.ndarray, ok: np.ndarray, width: int, height: int,
                  src_valid: np.ndarray | None = None) -> WarpPlan:
    shape = ok.shape
    x = np.where(ok, uv[..., 0] - 0.5, 0.0)
    y = np.where(ok, uv[..., 1] - 0.5, 0.0)
    # within half a pixel of the border: replicate the edge sample
    x = np.clip(x, 0.0, width - 1.0)
    y = np.clip(y, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), width - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), height - 2)
    fx, fy = x - x0, y - y0
    idx = np.stack([y0 * width + x0, y0 * width + x0 + 1,
                    (y0 + 1) * width + x0, (y0 + 1) * width + x0 + 1], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    valid = ok.copy()
    if src_valid is not None:
        sv = src_valid.reshape(-1)
        # any invalid corner with non-zero weight invalidates the sample
        valid &= np.all(sv[idx] | (wts == 0.0), axis=-1)
    return WarpPlan(idx.reshape(-1, 4), wts.reshape(-1, 4), valid, (height, width))


def warp_to_fisheye(src: DenseMap, src_cam: Camera, dst_cam: Camera) -> DenseMap:
    """Resample a perspective map onto the fisheye pixel grid (inverse mapping)."""
    plan = warp_plan(src_cam, dst_cam, src.valid)
    return DenseMap(plan.apply(src.values), plan.valid)


def unwarp_dense(pred: DenseMap, fish_cam: Camera, persp_cam: Camera,
                 ray_channels: slice | None = None, rays: str = "recompute") -> DenseMap:
    """Bring fisheye-grid predictions back onto the perspective grid.

    Ray depth is resampled as is (distance along a ray does not change when
    the same ray is reprojected). Channels in ``ray_channels`` are either
    recomputed from ``persp_cam`` or, with ``rays="resample"``, resampled and
    renormalised so predicted directions can be compared.
    """
    plan = warp_plan(fish_cam, persp_cam, pred.valid)
    out = plan.apply(pred.values)
    if ray_channels is not None:
        if rays == "recompute":
            out[..., ray_channels] = ray_map(persp_cam).dirs
        elif rays == "resample":
            v = out[..., ray_channels]
            n = np.linalg.norm(v, axis=-1, keepdims=True)
            out[..., ray_channels] = v / np.where(n > 0, n, 1.0)
        else:
            raise ValueError(f"unknown ray mode {rays!r}")
        out[~plan.valid] = 0.0
    return DenseMap(out, plan.valid)


# ---------------------------------------------------------------------------
# field of view


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def fov_of(cam: Camera) -> tuple[float, float]:
    """(horizontal, vertical) field of view in degrees through the border midpoints."""
    w, h = cam.width, cam.height
    pts = np.array([[0.0, h / 2], [w, h / 2], [w / 2, 0.0], [w / 2, h]])
    d, ok = cam.unproject(pts)
    if not ok.all():
        raise OutOfRangeError("border midpoint outside the camera's valid range")
    return _angle(d[0], d[1]), _angle(d[2], d[3])


def rays_fov(dirs: np.ndarray, valid: np.ndarray | None = None) -> tuple[float, float]:
    """FoV from a ray map: angle between mean rays of the outer columns / rows."""
    if valid is None:
        valid = np.ones(dirs.shape[:2], dtype=bool)

    def mean_ray(sel_d, sel_v):
        if not sel_v.any():
            return None
        return sel_d[sel_v].mean(axis=0)

    left, right = mean_ray(dirs[:, 0], valid[:, 0]), mean_ray(dirs[:, -1], valid[:, -1])
    top, bottom = mean_ray(dirs[0], valid[0]), mean_ray(dirs[-1], valid[-1])
    h = _angle(left, right) if left is not None and right is not None else float("nan")
    v = _angle(top, bottom) if top is not None and bottom is not None else float("nan")
    return h, v


# ---------------------------------------------------------------------------
# serialization


def camera_from_dict(d: dict) -> Camera:
    d = dict(d)
    model = d.pop("model")
    if model == "pinhole":
        return PinholeCamera(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "width", "height")})
    if model == "kannala_brandt":
        d.pop("theta_max", None)
        return KannalaBrandtCamera(**d)
    raise ValueError(f"unknown camera model {model!r}")


def camera_to_json(cam: Camera) -> str:
    return json.dumps(cam.to_dict(), sort_keys=True)


def camera_from_json(text: str) -> Camera:
    return camera_from_dict(json.loads(text))
