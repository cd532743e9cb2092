"""Procedural rooms of textured planes and boxes, ray-cast into exact multi-view ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, KannalaBrandtCamera, PinholeCamera, camera_from_dict, kb_radius
from .geometry import CameraPose, look_at

ROOM_HALF = 4.0
ROOM_HEIGHT = 3.0
# cameras live in this box; boxes are kept out of it
CAM_X = (-1.0, 3.0)
CAM_Z = (-3.0, 1.0)
CAM_Y = (1.2, 1.8)
PITCH = (-0.3, 0.05)
TEXTURE_PERIOD = (0.35, 0.6)


@dataclass
class Plane:
    """Rectangle ``origin + a*e1 + b*e2`` for a, b in [0, 1]."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    colors: np.ndarray  # (2, 3)
    period: float
    phase: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - o) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        q = o + t[:, None] * d
        rel = q - self.origin
        a = rel @ self.e1 / (self.e1 @ self.e1)
        b = rel @ self.e2 / (self.e2 @ self.e2)
        inside = (t > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        return np.where(inside, t, np.inf), np.broadcast_to(n, d.shape)

    def contains(self, p: np.ndarray, tol: float) -> np.ndarray:
        rel = p - self.origin
        dist = np.abs(rel @ self.normal)
        a = rel @ self.e1 / (self.e1 @ self.e1)
        b = rel @ self.e2 / (self.e2 @ self.e2)
        return (dist <= tol) & (a >= -tol) & (a <= 1 + tol) & (b >= -tol) & (b <= 1 + tol)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    colors: np.ndarray
    period: float
    phase: np.ndarray

    def intersect(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.lo - o) * inv
            t1 = (self.hi - o) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        hit = (near <= far) & (near > 1e-9)
        axis = tmin.argmax(axis=1)
        n = np.zeros_like(d)
        n[np.arange(len(d)), axis] = -np.sign(d[np.arange(len(d)), axis])
        return np.where(hit, near, np.inf), n

    def contains(self, p: np.ndarray, tol: float) -> np.ndarray:
        inside = np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)
        face = np.any((np.abs(p - self.lo) <= tol) | (np.abs(p - self.hi) <= tol), axis=-1)
        return inside & face


Primitive = Plane | Box


@dataclass
class Scene:
    primitives: list
    extent: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.array([-ROOM_HALF, 0.0, -ROOM_HALF]),
                                 np.array([ROOM_HALF, ROOM_HEIGHT, ROOM_HALF])))

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            base = {"colors": p.colors.tolist(), "period": p.period, "phase": p.phase.tolist()}
            if isinstance(p, Plane):
                base.update(kind="plane", origin=p.origin.tolist(), e1=p.e1.tolist(), e2=p.e2.tolist())
            else:
                base.update(kind="box", lo=p.lo.tolist(), hi=p.hi.tolist())
            prims.append(base)
        return {"primitives": prims}


def _palette(rng: np.random.Generator) -> np.ndarray:
    c0 = rng.uniform(0.15, 0.9, size=3)
    c1 = np.clip(c0 * rng.uniform(0.35, 0.7), 0.0, 1.0)
    return np.stack([c0, c1])


def generate_scene(rng: np.random.Generator, complexity: int = 2) -> Scene:
    """A room corner (floor, back wall, left wall) plus up to ``3*complexity - 3`` extras."""
    if complexity < 1:
        raise ValueError("complexity must be >= 1")
    H, R = ROOM_HALF, ROOM_HEIGHT
    tex = lambda: dict(colors=_palette(rng), period=float(rng.uniform(*TEXTURE_PERIOD)),
                       phase=rng.uniform(0.1, 0.4, size=3))
    v = np.array
    prims: list = [
        Plane(v([-H, 0.0, -H]), v([0.0, 0.0, 2 * H]), v([2 * H, 0.0, 0.0]), **tex()),  # floor, normal +y
        Plane(v([-H, 0.0, H]), v([0.0, R, 0.0]), v([2 * H, 0.0, 0.0]), **tex()),       # back wall z=+H
        Plane(v([-H, 0.0, -H]), v([0.0, R, 0.0]), v([0.0, 0.0, 2 * H]), **tex()),      # left wall x=-H
    ]
    n_total = int(rng.integers(3, 3 * complexity + 1))
    optional = [
        Plane(v([H, 0.0, -H]), v([0.0, 0.0, 2 * H]), v([0.0, R, 0.0]), **tex()),       # right wall
        Plane(v([-H, R, -H]), v([2 * H, 0.0, 0.0]), v([0.0, 0.0, 2 * H]), **tex()),    # ceiling
    ]
    while len(prims) < n_total:
        if optional and rng.random() < 0.4:
            prims.append(optional.pop(0))
            continue
        size = rng.uniform([0.4, 0.3, 0.4], [1.4, 1.6, 1.4])
        if rng.random() < 0.5:   # along the back wall
            x = rng.uniform(-H + 0.1, H - 0.1 - size[0])
            z = rng.uniform(1.6, H - size[2])
        else:                    # along the left wall
            x = rng.uniform(-H, -1.6 - size[0])
            z = rng.uniform(-H + 0.1, H - size[2])
        lo = v([x, 0.0, z])
        prims.append(Box(lo, lo + size, **tex()))
    return Scene(prims)


def _albedo(prim, p: np.ndarray, n: np.ndarray) -> np.ndarray:
    cell = np.floor(p / prim.period + prim.phase).astype(np.int64)
    check = (cell.sum(axis=-1) & 1).astype(np.float64)
    base = prim.colors[0] * (1 - check[:, None]) + prim.colors[1] * check[:, None]
    light = np.array([0.3, 0.8, -0.5])
    light /= np.linalg.norm(light)
    shade = 0.65 + 0.35 * np.abs(n @ light)
    return base * shade[:, None]


def camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit rays built directly from the projection model.

    Kept separate from :meth:`unproject` so the two can check each other:
    fisheye angles come from plain bisection rather than guarded Newton.
    """
    w, h = cam.width, cam.height
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    mx = (u - cam.cx) / cam.fx
    my = (v - cam.cy) / cam.fy
    if isinstance(cam, PinholeCamera):
        n = np.sqrt(mx * mx + my * my + 1.0)
        return np.stack([mx / n, my / n, 1.0 / n], axis=-1), np.ones((h, w), dtype=bool)
    r = np.sqrt(mx * mx + my * my)
    ok = r <= cam.r_max
    target = np.minimum(r, cam.r_max)
    lo = np.zeros_like(r)
    hi = np.full_like(r, cam.theta_max)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        above = kb_radius(mid, cam.coeffs) > target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    theta = 0.5 * (lo + hi)
    s = np.sin(theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        dx = np.where(r > 0, s * mx / r, 0.0)
        dy = np.where(r > 0, s * my / r, 0.0)
    return np.stack([dx, dy, np.cos(theta)], axis=-1), ok


@dataclass
class Frame:
    rgb: np.ndarray     # (H, W, 3) in [0, 1], on the 8-bit grid
    depth: np.ndarray   # (H, W) ray depth, 0 where invalid
    rays: np.ndarray    # (H, W, 3) unit camera-frame rays
    valid: np.ndarray   # (H, W)
    pose: CameraPose
    camera: Camera

    @property
    def is_fisheye(self) -> bool:
        return isinstance(self.camera, KannalaBrandtCamera)


def render(scene: Scene, camera: Camera, pose: CameraPose) -> Frame:
    """Ray-cast one view: 8-bit RGB, ray depth, camera rays and hit mask."""
    rays, cam_ok = camera_rays(camera)
    h, w = cam_ok.shape
    d_cam = rays.reshape(-1, 3)
    d_world = d_cam @ pose.R.T
    o = pose.t
    best = np.full(len(d_world), np.inf)
    normal = np.zeros_like(d_world)
    owner = np.full(len(d_world), -1)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(o, d_world)
        closer = t < best
        best = np.where(closer, t, best)
        normal[closer] = n[closer]
        owner[closer] = i
    hit = np.isfinite(best) & cam_ok.reshape(-1)
    rgb = np.zeros((len(d_world), 3))
    pts = o + np.where(hit, best, 0.0)[:, None] * d_world
    for i, prim in enumerate(scene.primitives):
        sel = hit & (owner == i)
        if sel.any():
            rgb[sel] = _albedo(prim, pts[sel], normal[sel])
    rgb = np.round(np.clip(rgb, 0, 1) * 255.0) / 255.0
    depth = np.where(hit, best, 0.0)
    return Frame(rgb.reshape(h, w, 3), depth.reshape(h, w), rays, hit.reshape(h, w), pose, camera)


def random_pose(rng: np.random.Generator) -> CameraPose:
    eye = np.array([rng.uniform(*CAM_X), rng.uniform(*CAM_Y), rng.uniform(*CAM_Z)])
    return _pose_from_angles(eye, rng.uniform(0.0, math.pi / 2), rng.uniform(*PITCH))


def _pose_from_angles(eye: np.ndarray, yaw: float, pitch: float) -> CameraPose:
    fwd = np.array([-math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)])
    return look_at(eye, eye + fwd)


def _angles_of(pose: CameraPose) -> tuple[float, float]:
    f = pose.R[:, 2]
    return math.atan2(-f[0], f[2]), math.asin(np.clip(f[1], -1, 1))


def perturb_pose(rng: np.random.Generator, pose: CameraPose) -> CameraPose:
    yaw, pitch = _angles_of(pose)
    eye = pose.t + rng.normal(0.0, [0.35, 0.08, 0.35])
    eye = np.clip(eye, [CAM_X[0], CAM_Y[0], CAM_Z[0]], [CAM_X[1], CAM_Y[1], CAM_Z[1]])
    yaw = float(np.clip(yaw + rng.normal(0, 0.25), -0.1, math.pi / 2 + 0.1))
    pitch = float(np.clip(pitch + rng.normal(0, 0.06), PITCH[0] - 0.05, PITCH[1] + 0.05))
    return _pose_from_angles(eye, yaw, pitch)


def covisibility(src: Frame, dst: Frame, tol: float = 0.02) -> float:
    """Fraction of ``src`` hit pixels whose 3-D point is seen by ``dst`` at matching depth."""
    if not src.valid.any():
        return 0.0
    pts_cam = src.rays[src.valid] * src.depth[src.valid][:, None]
    world = pts_cam @ src.pose.R.T + src.pose.t
    in_dst = (world - dst.pose.t) @ dst.pose.R
    dist = np.linalg.norm(in_dst, axis=-1)
    dirs = in_dst / np.maximum(dist, 1e-12)[:, None]
    uv, ok = dst.camera.project(dirs)
    h, w = dst.valid.shape
    col = np.clip(np.floor(np.nan_to_num(uv[:, 0])).astype(int), 0, w - 1)
    row = np.clip(np.floor(np.nan_to_num(uv[:, 1])).astype(int), 0, h - 1)
    ok &= dst.valid[row, col]
    ref = dst.depth[row, col]
    ok &= np.abs(dist - ref) <= tol * np.maximum(ref, 1e-12)
    return float(ok.mean())


@dataclass
class SceneSample:
    frames: list[Frame]

    @property
    def camera_types(self) -> np.ndarray:
        return np.array([int(f.is_fisheye) for f in self.frames], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.frames)

    def stacked(self) -> dict[str, np.ndarray]:
        return {
            "rgb": np.stack([f.rgb for f in self.frames]),
            "depth": np.stack([f.depth for f in self.frames]),
            "rays": np.stack([f.rays for f in self.frames]),
            "valid": np.stack([f.valid for f in self.frames]),
            "R": np.stack([f.pose.R for f in self.frames]),
            "t": np.stack([f.pose.t for f in self.frames]),
        }


class SamplingError(RuntimeError):
    pass


def sample_sequence(scene: Scene, rng: np.random.Generator, length_range=(2, 24),
                    camera: Camera | None = None, cameras=None, min_covis: float = 0.25,
                    max_tries: int = 200) -> SceneSample:
    """Grow a sequence frame by frame; each new frame needs a >= ``min_covis`` partner.

    Covisibility is judged on frames rendered with ``camera``; ``cameras``
    (one per frame) optionally re-renders the accepted poses with other models.
    """
    lo, hi = length_range
    n = int(rng.integers(lo, hi + 1))
    if camera is None:
        camera = default_camera()
    frames = [render(scene, camera, random_pose(rng))]
    tries = 0
    while len(frames) < n:
        tries += 1
        if tries > max_tries:
            raise SamplingError(f"could not reach {n} frames with covisibility >= {min_covis}")
        parent = frames[int(rng.integers(len(frames)))]
        cand = render(scene, camera, perturb_pose(rng, parent.pose))
        if any(covisibility(cand, f) >= min_covis for f in frames):
            frames.append(cand)
    if cameras is not None:
        frames = [f if c == camera else render(scene, c, f.pose) for f, c in zip(frames, cameras)]
    return SceneSample(frames)


def default_camera(size: int = 112, fov_deg: float = 90.0) -> PinholeCamera:
    """Square pinhole with the given horizontal FoV."""
    f = size / 2 / math.tan(math.radians(fov_deg) / 2)
    return PinholeCamera(f, f, size / 2, size / 2, size, size)


# ---------------------------------------------------------------------------
# persistence


def write_pfm(path: Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    color = data.ndim == 3
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype).reshape(h, w, ch)[::-1]
    data = data.astype(np.float64)
    return data if ch == 3 else data[..., 0]


def save_sample(sample: SceneSample, root: Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, f in enumerate(sample.frames):
        stem = f"frame_{i:03d}"
        Image.fromarray(np.round(f.rgb * 255).astype(np.uint8)).save(root / f"{stem}_rgb.png")
        write_pfm(root / f"{stem}_depth.pfm", f.depth)
        write_pfm(root / f"{stem}_rays.pfm", f.rays)
        entries.append({
            "rgb": f"{stem}_rgb.png", "depth": f"{stem}_depth.pfm", "rays": f"{stem}_rays.pfm",
            "pose": {"R": f.pose.R.tolist(), "t": f.pose.t.tolist()},
            "camera": f.camera.to_dict(), "fisheye": int(f.is_fisheye),
        })
    manifest = {"version": 1, "frames": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_sample(root: Path) -> SceneSample:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    frames = []
    for e in manifest["frames"]:
        rgb = np.asarray(Image.open(root / e["rgb"]), dtype=np.float64) / 255.0
        depth = read_pfm(root / e["depth"])
        rays = read_pfm(root / e["rays"])
        pose = CameraPose(np.array(e["pose"]["R"]), np.array(e["pose"]["t"]))
        frames.append(Frame(rgb, depth, rays, depth > 0, pose, camera_from_dict(e["camera"])))
    return SceneSample(frames)
