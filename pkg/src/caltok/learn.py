"""Losses, the three token-learning schemes, AdamW and the training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .backbone import Backbone, SequenceOutput
from .calibrate import CalibrationTokenSet
from .camera import Camera, PinholeCamera, WarpPlan, sample_distortion, warp_plan
from .nncore import NonFiniteError, Tensor
from .scenegen import SceneSample

log = logging.getLogger(__name__)

SCHEMES = ("ssl", "sl", "slplus")
_EPS = 1e-12
_SQRT_EPS = math.sqrt(_EPS)


@dataclass
class LossWeights:
    ray: float = 1.0
    depth: float = 1.0
    rot: float = 1.0
    trans: float = 1.0

    def __post_init__(self):
        vals = (self.ray, self.depth, self.rot, self.trans)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_start: float = 3e-3
    lr_end: float = 3e-5
    schedule: str = "cosine"
    batch_sequences: int = 1
    seq_len: tuple[int, int] = (2, 3)
    scheme: str = "ssl"
    init_std: float = 1e-6
    tokens_per_layer: int = 8
    weight_decay: float = 0.0
    mix: bool = False
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.seq_len = tuple(self.seq_len)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Target:
    """Supervision for a batch: arrays shaped like :class:`SequenceOutput`, plus validity."""

    rays: np.ndarray   # (B, S, H, W, 3)
    depth: np.ndarray  # (B, S, H, W)
    R: np.ndarray      # (B, S, 3, 3)
    t: np.ndarray      # (B, S, 3)
    valid: np.ndarray  # (B, S, H, W) pixels with a depth label
    ray_valid: np.ndarray | None = None  # pixels with a ray label; defaults to ``valid``

    @classmethod
    def from_samples(cls, samples: Sequence[SceneSample]) -> "Target":
        st = [s.stacked() for s in samples]
        arrs = [np.stack([x[k] for x in st]) for k in ("rays", "depth", "R", "t", "valid")]
        # camera rays are known on every pixel inside the lens model, scene hit or not
        return cls(*arrs, ray_valid=np.linalg.norm(arrs[0], axis=-1) > 0.5)

    @classmethod
    def from_output(cls, out: SequenceOutput, valid: np.ndarray | None = None) -> "Target":
        if valid is None:
            valid = np.ones(out.depth.shape, dtype=bool)
        return cls(out.rays.data, out.depth.data, out.R.data, out.t.data, valid, valid.copy())

    def restrict(self, mask: np.ndarray) -> "Target":
        rv = self.valid if self.ray_valid is None else self.ray_valid
        return Target(self.rays, self.depth, self.R, self.t, self.valid & mask, rv & mask)


@dataclass
class LossTerms:
    total: Tensor
    terms: dict[str, float]
    per_frame: dict[str, np.ndarray]


def _angle_between_units(a: Tensor, b: np.ndarray) -> Tensor:
    """atan2(|a x b|, a.b): exactly zero for parallel inputs even when not quite unit length."""
    c = nn.tsum(a * b, axis=-1)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    x = a1 * b2 - a2 * b1
    y = a2 * b0 - a0 * b2
    z = a0 * b1 - a1 * b0
    s = nn.sqrt(x * x + y * y + z * z + _EPS) - _SQRT_EPS
    return nn.atan2(s, c)


def _rotation_geodesic(M: Tensor) -> Tensor:
    """Rotation angle of (..., 3, 3) matrices, smooth at the identity."""
    tr = M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2]
    vx = M[..., 2, 1] - M[..., 1, 2]
    vy = M[..., 0, 2] - M[..., 2, 0]
    vz = M[..., 1, 0] - M[..., 0, 1]
    s = (nn.sqrt((vx * vx + vy * vy + vz * vz) * 0.25 + _EPS) - _SQRT_EPS)
    return nn.atan2(s, (tr - 1.0) * 0.5)


def _masked_frame_mean(x: Tensor, valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean over valid pixels of the whole batch, plus per-frame means (B, S)."""
    w = valid.astype(np.float64)
    count = w.sum()
    if count == 0:
        raise ValueError("no valid pixels to supervise")
    per = (x.data * w).sum(axis=(-1, -2)) / np.maximum(w.sum(axis=(-1, -2)), 1.0)
    return nn.tsum(x * w) * (1.0 / count), per


def reconstruction_loss(pred: SequenceOutput, target: Target,
                        weights: LossWeights | None = None) -> LossTerms:
    """Weighted sum of ray angle, absolute log-depth, relative rotation and translation errors.

    Pose terms compare every frame's pose relative to the first frame;
    translations are divided by the target's median depth per sequence.
    """
    weights = weights or LossWeights()
    valid = target.valid & (target.depth > 0)
    ray_valid = valid if target.ray_valid is None else target.ray_valid
    ray_err = _angle_between_units(pred.rays, target.rays)
    ray, ray_pf = _masked_frame_mean(ray_err, ray_valid)
    safe_depth = np.where(valid, target.depth, 1.0)
    log_err = nn.absolute(nn.log(pred.depth) - np.log(safe_depth))
    depth, depth_pf = _masked_frame_mean(log_err, valid)

    B, S = target.R.shape[:2]
    if S > 1:
        R1 = pred.R[:, :1]
        rel_R = nn.matmul(nn.swapaxes(R1, -1, -2), pred.R[:, 1:])
        gt_rel_R = np.swapaxes(target.R[:, :1], -1, -2) @ target.R[:, 1:]
        rot = nn.mean(_rotation_geodesic(nn.matmul(np.swapaxes(gt_rel_R, -1, -2), rel_R)))
        dt = nn.reshape(pred.t[:, 1:] - pred.t[:, :1], (B, S - 1, 3, 1))
        rel_t = nn.reshape(nn.matmul(nn.swapaxes(R1, -1, -2), dt), (B, S - 1, 3))
        gt_rel_t = np.einsum("bij,bsi->bsj", target.R[:, 0], target.t[:, 1:] - target.t[:, :1])
        scale = np.array([np.median(target.depth[b][valid[b]]) if valid[b].any() else 1.0
                          for b in range(B)]).reshape(B, 1, 1)
        diff = (rel_t - gt_rel_t) / scale
        trans = nn.mean(nn.sqrt(nn.tsum(diff * diff, axis=-1) + _EPS) - _SQRT_EPS)
    else:
        rot = trans = Tensor(0.0)
    total = ray * weights.ray + depth * weights.depth + rot * weights.rot + trans * weights.trans
    terms = {"ray": ray.item(), "depth": depth.item(), "rot": rot.item(), "trans": trans.item()}
    return LossTerms(total, terms, {"ray": ray_pf, "depth": depth_pf})


# ---------------------------------------------------------------------------
# distortion synthesis and the three schemes


@dataclass
class DistortedBatch:
    """Fisheye images synthesised from perspective frames plus the plans to undo it."""

    images: np.ndarray          # (B, S, H, W, 3)
    valid: np.ndarray           # (B, S, H, W) fisheye pixels with perspective content
    cameras: list[Camera]       # one fisheye camera per sequence
    back: list[list[WarpPlan]]  # per sequence and frame: fisheye grid -> perspective grid


def distort_batch(rng: np.random.Generator, images: np.ndarray, persps: Sequence[PinholeCamera],
                  cameras: Sequence[Camera] | None = None) -> DistortedBatch:
    """Apply T per sequence: one fisheye camera per sequence (sampled around that sequence's
    pinhole unless given), inverse-mapped bilinearly."""
    B, S = images.shape[:2]
    out = np.zeros_like(images)
    valid = np.zeros(images.shape[:4], dtype=bool)
    cams, back = [], []
    for b in range(B):
        persp = persps[b]
        cam = cameras[b] if cameras is not None else sample_distortion(rng, persp)
        fwd = warp_plan(persp, cam)
        for s in range(S):
            out[b, s] = fwd.apply(images[b, s])
            valid[b, s] = fwd.valid
        cams.append(cam)
        back.append([warp_plan(cam, persp)] * S)
    return DistortedBatch(out, valid, cams, back)


def undistort_output(pred: SequenceOutput, batch: DistortedBatch) -> tuple[SequenceOutput, np.ndarray]:
    """T^-1 on dense predictions (differentiable); poses pass through unchanged."""
    B, S, H, W = pred.depth.shape
    rays_b, depth_b, valid = [], [], np.zeros((B, S, H, W), dtype=bool)
    for b in range(B):
        rs, ds = [], []
        for s in range(S):
            plan = batch.back[b][s]
            r = plan.apply_tensor(nn.reshape(pred.rays[b, s], (H * W, 3)))
            r = r / nn.sqrt(nn.tsum(r * r, axis=-1, keepdims=True) + _EPS)
            d = plan.apply_tensor(nn.reshape(pred.depth[b, s], (H * W, 1)))
            rs.append(nn.reshape(r, (H, W, 3)))
            ds.append(nn.reshape(d, (H, W)))
            valid[b, s] = plan.valid
        rays_b.append(nn.stack(rs))
        depth_b.append(nn.stack(ds))
    # invalid pixels still need a finite log: pin them to 1
    depth = nn.stack(depth_b) + (~valid).astype(np.float64)
    return SequenceOutput(nn.stack(rays_b), depth, pred.R, pred.t, pred.class_tokens,
                          pred.camera_bits), valid


def loss_ssl(model: Backbone, tokens: CalibrationTokenSet | None, images_p: np.ndarray,
             batch: DistortedBatch, weights: LossWeights | None = None,
             teacher: SequenceOutput | None = None, camera_bits=None) -> LossTerms:
    """Self-distillation: the frozen model on perspective frames supervises the calibrated
    model on their fisheye versions, compared after undistortion."""
    if teacher is None:
        teacher = model.forward(images_p)
    student = model.forward(batch.images, tokens=tokens, camera_bits=camera_bits)
    und, valid = undistort_output(student, batch)
    target = Target.from_output(teacher.detached()).restrict(valid)
    if not target.valid.any():
        raise ValueError("distortion left no valid pixels")
    return reconstruction_loss(und, target, weights)


def loss_sl(model: Backbone, tokens: CalibrationTokenSet | None, target_p: Target,
            batch: DistortedBatch, weights: LossWeights | None = None, camera_bits=None) -> LossTerms:
    """Perspective ground truth against undistorted predictions on synthesised fisheye frames."""
    student = model.forward(batch.images, tokens=tokens, camera_bits=camera_bits)
    und, valid = undistort_output(student, batch)
    target = target_p.restrict(valid)
    if not target.valid.any():
        raise ValueError("distortion left no valid pixels")
    return reconstruction_loss(und, target, weights)


def loss_slplus(model: Backbone, tokens: CalibrationTokenSet | None, images_f: np.ndarray,
                target_f: Target, weights: LossWeights | None = None, camera_bits=None) -> LossTerms:
    """Native fisheye ground truth, compared directly in the fisheye pixel grid."""
    student = model.forward(images_f, tokens=tokens, camera_bits=camera_bits)
    return reconstruction_loss(student, target_f, weights)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamWState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update; parameters get fresh arrays, never in-place."""
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name or p.shape}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(i, np.zeros(p.shape))
        v = state.v.get(i, np.zeros(p.shape))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[i], state.v[i] = m, v
        data = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data
        p.data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def lr_at(it: int, iterations: int, lr_start: float, lr_end: float, schedule: str = "cosine") -> float:
    if not 0 <= it < iterations:
        raise ValueError("iteration out of range")
    frac = it / (iterations - 1) if iterations > 1 else 1.0
    if schedule == "cosine":
        return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))
    if schedule == "linear":
        return lr_start + (lr_end - lr_start) * frac
    raise ValueError(f"unknown schedule {schedule!r}")


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    tokens: CalibrationTokenSet | None
    curve: list[dict]
    state: AdamWState
    reached: bool = True
    message: str = ""


def _batch_images(samples: Sequence[SceneSample], s: int) -> np.ndarray:
    return np.stack([np.stack([f.rgb for f in smp.frames[:s]]) for smp in samples])


def _truncate(samples: Sequence[SceneSample], s: int) -> list[SceneSample]:
    return [SceneSample(smp.frames[:s]) for smp in samples]


def _pick(rng, corpus, cfg: TrainConfig):
    lo, hi = cfg.seq_len
    idx = rng.integers(len(corpus), size=cfg.batch_sequences)
    s = int(rng.integers(lo, hi + 1))
    s = min([s] + [len(corpus[i]) for i in idx])
    return idx, s


def _streams(seed: int) -> list[np.random.Generator]:
    """Independent generators for token initialisation and batch sampling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]


def init_tokens(model: Backbone, cfg: TrainConfig) -> CalibrationTokenSet:
    mc = model.cfg
    return CalibrationTokenSet.init(_streams(cfg.seed)[0], mc.encoder_layers, mc.aa_blocks,
                                    mc.classifier_layer, cfg.tokens_per_layer, mc.embed_dim, cfg.init_std)


def train_tokens(model: Backbone, corpus: Sequence[SceneSample], cfg: TrainConfig,
                 tokens: CalibrationTokenSet | None = None,
                 state: AdamWState | None = None, start_iter: int = 0,
                 on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Optimise calibration tokens only; the backbone must be frozen and stays bitwise unchanged.

    ``corpus`` holds perspective samples for ``ssl``/``sl`` and native
    fisheye samples for ``slplus``. ``tokens``/``state``/``start_iter``
    resume an earlier run.
    """
    if not model.frozen:
        raise ValueError("backbone must be frozen before token training")
    rng = _streams(cfg.seed)[1]
    if tokens is None:
        tokens = init_tokens(model, cfg)
    state = state or AdamWState()
    params = tokens.tensors
    before = model.weight_hash()
    teacher_cache: dict[tuple, SequenceOutput] = {}
    curve = []
    # replay the RNG stream of completed iterations so a resumed run matches an uninterrupted one
    for _ in range(start_iter):
        _draw_step(rng, corpus, cfg)
    for it in range(start_iter, cfg.iterations):
        idx, s, bits, cams = _draw_step(rng, corpus, cfg)
        samples = _truncate([corpus[i] for i in idx], s)
        lr = lr_at(it, cfg.iterations, cfg.lr_start, cfg.lr_end, cfg.schedule)
        with nn.Tape() as tape:
            terms = _scheme_loss(model, tokens, samples, cfg, rng, bits, cams, idx, teacher_cache)
        if not np.isfinite(terms.total.item()):
            raise NonFiniteError(f"loss diverged at iteration {it}: {terms.terms}")
        opt_params = [p for p in tape.parameters]
        if {id(p) for p in opt_params} - {id(p) for p in params}:
            raise RuntimeError("a non-token tensor reached the optimiser")
        # an all-perspective mix batch runs the plain path: the loss does not touch the tokens
        grads = nn.backward(tape, terms.total) if terms.total.requires_grad else {}
        adamw_step(params, grads, state, lr, weight_decay=cfg.weight_decay)
        row = {"iteration": it, "total": terms.total.item(), **terms.terms, "lr": lr}
        curve.append(row)
        if on_step:
            on_step(it, row)
    if model.weight_hash() != before:
        raise RuntimeError("backbone weights changed during token training")
    return TrainResult(tokens, curve, state)


def _draw_step(rng, corpus, cfg: TrainConfig):
    """Sequence choice, length, per-frame camera bits (mix training) and fisheye cameras."""
    idx, s = _pick(rng, corpus, cfg)
    bits = None
    if cfg.mix:
        bits = np.ones((len(idx), s), dtype=np.int64)
        for b in range(len(idx)):
            kind = rng.integers(3)
            if kind == 0:
                bits[b] = 0
            elif kind == 2:
                bits[b] = (rng.random(s) < 0.5).astype(np.int64)
    cams = None
    if cfg.scheme != "slplus":
        cams = [sample_distortion(rng, corpus[i].frames[0].camera) for i in idx]
    return idx, s, bits, cams


def _scheme_loss(model, tokens, samples, cfg, rng, bits, cams, idx, teacher_cache):
    s = len(samples[0])
    if cfg.scheme == "slplus":
        target = Target.from_samples(samples)
        return loss_slplus(model, tokens, _batch_images(samples, s), target, cfg.weights)
    images_p = _batch_images(samples, s)
    persps = [smp.frames[0].camera for smp in samples]
    batch = distort_batch(rng, images_p, persps, cams)
    if bits is not None:
        # perspective frames in a mixed sequence keep their original pixels and need no undistortion
        _mix_frames(batch, images_p, bits, persps)
    if cfg.scheme == "ssl":
        key = (tuple(idx), s)
        teacher = teacher_cache.get(key)
        if teacher is None:
            teacher = model.forward(images_p)
            teacher_cache[key] = teacher
        return loss_ssl(model, tokens, images_p, batch, cfg.weights, teacher, camera_bits=bits)
    target = Target.from_samples(samples)
    return loss_sl(model, tokens, target, batch, cfg.weights, camera_bits=bits)


def _mix_frames(batch: DistortedBatch, images_p, bits, persps) -> None:
    for b in range(bits.shape[0]):
        identity = warp_plan(persps[b], persps[b])
        for s in np.flatnonzero(bits[b] == 0):
            batch.images[b, s] = images_p[b, s]
            batch.valid[b, s] = True
            batch.back[b][s] = identity


def pretrain_backbone(model: Backbone, corpus: Sequence[SceneSample], cfg: TrainConfig,
                      evaluate: Callable[[Backbone], float] | None = None, threshold: float = 0.15,
                      eval_every: int = 500, on_step: Callable[[int, dict], None] | None = None,
                      weight_decay: float = 1e-4) -> TrainResult:
    """Fit every backbone weight to perspective ground truth, then freeze.

    ``evaluate`` returns held-out depth Rel; ``reached`` reports whether it
    fell below ``threshold`` within the iteration budget.
    """
    rng = np.random.default_rng(cfg.seed)
    model.set_trainable(True)
    params = list(model.params.values())
    state = AdamWState()
    curve = []
    rel = float("nan")
    try:
        for it in range(cfg.iterations):
            idx, s = _pick(rng, corpus, cfg)
            samples = _truncate([corpus[i] for i in idx], s)
            lr = lr_at(it, cfg.iterations, cfg.lr_start, cfg.lr_end, cfg.schedule)
            with nn.Tape() as tape:
                out = model.forward(_batch_images(samples, s))
                terms = reconstruction_loss(out, Target.from_samples(samples), cfg.weights)
            if not np.isfinite(terms.total.item()):
                raise NonFiniteError(f"pretraining diverged at iteration {it}")
            grads = nn.backward(tape, terms.total)
            adamw_step(params, grads, state, lr, weight_decay=weight_decay)
            row = {"iteration": it, "total": terms.total.item(), **terms.terms, "lr": lr}
            if evaluate is not None and ((it + 1) % eval_every == 0 or it + 1 == cfg.iterations):
                model.set_trainable(False)
                rel = evaluate(model)
                model.set_trainable(True)
                row["heldout_rel"] = rel
                log.info("pretrain it=%d loss=%.4f heldout Rel=%.4f", it, row["total"], rel)
            curve.append(row)
            if on_step:
                on_step(it, row)
    finally:
        model.set_trainable(False)
    reached = evaluate is None or rel < threshold
    msg = "" if reached else f"held-out depth Rel {rel:.4f} did not reach {threshold}"
    if not reached:
        log.warning(msg)
    return TrainResult(None, curve, state, reached, msg)
