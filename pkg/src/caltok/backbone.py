"""Toy feed-forward multi-view reconstruction transformer.

Patch embedding with a class token, ``encoder_layers`` per-frame encoder
blocks, ``aa_blocks`` alternating (frame-wise then global) attention blocks,
and heads for camera pose and per-pixel ray direction plus ray depth.
Calibration tokens and camera-type masks are threaded through every layer
from ``start_layer`` on.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import nncore as nn
from .calibrate import CalibrationTokenSet, CameraClassifier, build_frame_mask, build_global_mask, masked_attention
from .geometry import CameraPose, relative_pose  # noqa: F401  (re-exported)
from .nncore import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 14
    embed_dim: int = 64
    encoder_layers: int = 6
    aa_blocks: int = 4
    heads: int = 4
    height: int = 112
    width: int = 112
    mlp_ratio: int = 4
    head_hidden: int = 128
    classifier_layer: int = 3

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("image extents must be divisible by the patch size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0 <= self.classifier_layer <= self.encoder_layers:
            raise ValueError("classifier_layer must lie in [0, encoder_layers]")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_position_encoding(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encodings, half the channels for rows and half for columns."""
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")

    def enc(pos):
        a = pos.reshape(-1, 1) * freqs[None]
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    pe = np.concatenate([enc(rows), enc(cols)], axis=1)
    if pe.shape[1] < dim:
        pe = np.pad(pe, ((0, 0), (0, dim - pe.shape[1])))
    return pe


def _block_params(rng, prefix: str, d: int, hidden: int, depth: int) -> dict[str, np.ndarray]:
    std = 0.02
    out_std = std / math.sqrt(2 * depth)
    return {
        f"{prefix}.ln1.g": np.ones(d), f"{prefix}.ln1.b": np.zeros(d),
        f"{prefix}.qkv.w": rng.normal(0, std, (d, 3 * d)), f"{prefix}.qkv.b": np.zeros(3 * d),
        f"{prefix}.proj.w": rng.normal(0, out_std, (d, d)), f"{prefix}.proj.b": np.zeros(d),
        f"{prefix}.ln2.g": np.ones(d), f"{prefix}.ln2.b": np.zeros(d),
        f"{prefix}.fc1.w": rng.normal(0, std, (d, hidden)), f"{prefix}.fc1.b": np.zeros(hidden),
        f"{prefix}.fc2.w": rng.normal(0, out_std, (hidden, d)), f"{prefix}.fc2.b": np.zeros(d),
    }


def init_params(cfg: BackboneConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, P = cfg.embed_dim, cfg.patch_size
    hidden = cfg.mlp_ratio * d
    depth = cfg.encoder_layers + 2 * cfg.aa_blocks
    p: dict[str, np.ndarray] = {
        "patch.w": rng.normal(0, 1.0 / math.sqrt(3 * P * P), (3 * P * P, d)),
        "patch.b": np.zeros(d),
        "cls": rng.normal(0, 0.02, d),
        "aa.ref": rng.normal(0, 0.02, d),
        "aa.other": rng.normal(0, 0.02, d),
    }
    for i in range(cfg.encoder_layers):
        p.update(_block_params(rng, f"enc{i}", d, hidden, depth))
    for i in range(cfg.aa_blocks):
        p.update(_block_params(rng, f"frame{i}", d, hidden, depth))
        p.update(_block_params(rng, f"global{i}", d, hidden, depth))
    hh = cfg.head_hidden
    p.update({
        "dense.ln.g": np.ones(d), "dense.ln.b": np.zeros(d),
        "dense.fc1.w": rng.normal(0, 0.02, (d, hh)), "dense.fc1.b": np.zeros(hh),
        "dense.fc2.w": rng.normal(0, 0.002, (hh, P * P * 4)), "dense.fc2.b": np.zeros(P * P * 4),
        "pose.ln.g": np.ones(d), "pose.ln.b": np.zeros(d),
        "pose.fc1.w": rng.normal(0, 0.02, (d, hh)), "pose.fc1.b": np.zeros(hh),
        "pose.fc2.w": rng.normal(0, 0.002, (hh, 7)), "pose.fc2.b": np.zeros(7),
    })
    return {k: Tensor(v, name=k) for k, v in p.items()}


def quat_to_rotation(q: Tensor) -> Tensor:
    """Normalised quaternions (..., 4) in (w, x, y, z) order to rotation matrices (..., 3, 3)."""
    raw = q.data
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    u = raw / norm
    w, x, y, z = np.moveaxis(u, -1, 0)
    R = np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)

    def vjp(g):
        gw, gx, gy, gz = (g[..., 0, 1] * -2 * z + g[..., 0, 2] * 2 * y + g[..., 1, 0] * 2 * z
                          + g[..., 1, 2] * -2 * x + g[..., 2, 0] * -2 * y + g[..., 2, 1] * 2 * x,
                          g[..., 0, 1] * 2 * y + g[..., 0, 2] * 2 * z + g[..., 1, 0] * 2 * y
                          + g[..., 1, 1] * -4 * x + g[..., 1, 2] * -2 * w + g[..., 2, 0] * 2 * z
                          + g[..., 2, 1] * 2 * w + g[..., 2, 2] * -4 * x,
                          g[..., 0, 0] * -4 * y + g[..., 0, 1] * 2 * x + g[..., 0, 2] * 2 * w
                          + g[..., 1, 0] * 2 * x + g[..., 1, 2] * 2 * z + g[..., 2, 0] * -2 * w
                          + g[..., 2, 1] * 2 * z + g[..., 2, 2] * -4 * y,
                          g[..., 0, 0] * -4 * z + g[..., 0, 1] * -2 * w + g[..., 0, 2] * 2 * x
                          + g[..., 1, 0] * 2 * w + g[..., 1, 1] * -4 * z + g[..., 1, 2] * 2 * y
                          + g[..., 2, 0] * 2 * x + g[..., 2, 1] * 2 * y)
        gu = np.stack([gw, gx, gy, gz], axis=-1)
        # through the normalisation u = q / |q|
        gq = (gu - u * (gu * u).sum(axis=-1, keepdims=True)) / norm
        return (gq,)

    return nn._record("quat_to_rotation", R, (q,), vjp)


@dataclass
class SequenceOutput:
    rays: Tensor    # (B, S, H, W, 3) unit directions
    depth: Tensor   # (B, S, H, W) ray depth
    R: Tensor       # (B, S, 3, 3) camera-to-world rotation
    t: Tensor       # (B, S, 3)
    class_tokens: np.ndarray  # (B, S, d) at the classifier layer
    camera_bits: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.rays.shape[1]

    def poses(self, b: int = 0) -> list[CameraPose]:
        return [CameraPose(self.R.data[b, s], self.t.data[b, s]) for s in range(self.num_frames)]

    def detached(self) -> "SequenceOutput":
        return SequenceOutput(nn.stop_gradient(self.rays), nn.stop_gradient(self.depth),
                              nn.stop_gradient(self.R), nn.stop_gradient(self.t),
                              self.class_tokens, self.camera_bits)


class Backbone:
    """Toy reconstruction model; weights live in ``params`` as named tensors."""

    def __init__(self, cfg: BackboneConfig | None = None, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg or BackboneConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)
        gh, gw = self.cfg.grid
        self.pos = sincos_position_encoding(gh, gw, self.cfg.embed_dim)

    # -- weights ------------------------------------------------------------

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.trainable = t.requires_grad = flag

    @property
    def frozen(self) -> bool:
        return not any(t.trainable for t in self.params.values())

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    # -- stages ---------------------------------------------------------------

    def patchify(self, images: np.ndarray) -> Tensor:
        """(F, H, W, 3) images to (F, 1+N, d) tokens: class token then patch embeddings."""
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != (cfg.height, cfg.width, 3):
            raise ValueError(f"expected frames of {(cfg.height, cfg.width, 3)}, got {images.shape[1:]}")
        f = images.shape[0]
        P = cfg.patch_size
        gh, gw = cfg.grid
        patches = (images.reshape(f, gh, P, gw, P, 3).transpose(0, 1, 3, 2, 4, 5)
                   .reshape(f, gh * gw, P * P * 3)) - 0.5
        p = self.params
        emb = nn.matmul(patches, p["patch.w"]) + p["patch.b"] + self.pos
        cls = nn.broadcast_to(nn.reshape(p["cls"], (1, 1, -1)), (f, 1, cfg.embed_dim))
        return nn.concat([cls, emb], axis=1)

    def block(self, x: Tensor, prefix: str, extra: Tensor | None = None,
              mask: np.ndarray | None = None, mode: str = "presoftmax") -> Tensor:
        """Pre-norm transformer block on (B, T, d). ``extra`` (K, d) tokens are appended then dropped."""
        p = self.params
        b, t, d = x.shape
        if extra is not None:
            x = nn.concat([x, nn.broadcast_to(nn.reshape(extra, (1,) + extra.shape),
                                              (b,) + extra.shape)], axis=1)
        T = x.shape[1]
        h = self.cfg.heads
        dh = d // h
        y = nn.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        qkv = nn.transpose(nn.reshape(nn.matmul(y, p[f"{prefix}.qkv.w"]) + p[f"{prefix}.qkv.b"],
                                      (b, T, 3, h, dh)), (2, 0, 3, 1, 4))
        m = None if mask is None else mask[:, None]
        att = masked_attention(qkv[0], qkv[1], qkv[2], m, mode)
        att = nn.reshape(nn.transpose(att, (0, 2, 1, 3)), (b, T, d))
        x = x + nn.matmul(att, p[f"{prefix}.proj.w"]) + p[f"{prefix}.proj.b"]
        y = nn.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        y = nn.gelu(nn.matmul(y, p[f"{prefix}.fc1.w"]) + p[f"{prefix}.fc1.b"])
        x = x + nn.matmul(y, p[f"{prefix}.fc2.w"]) + p[f"{prefix}.fc2.b"]
        if extra is not None:
            x = x[:, :t]
        return x

    def encode(self, x: Tensor, layer: int, extra: Tensor | None = None,
               mask: np.ndarray | None = None, mode: str = "presoftmax") -> Tensor:
        return self.block(x, f"enc{layer}", extra, mask, mode)

    def alternating_attention(self, z: Tensor, block: int, seq_shape: tuple[int, int],
                              frame_extra=None, global_extra=None, frame_mask=None,
                              global_mask=None, mode: str = "presoftmax") -> Tensor:
        """Frame-wise attention per frame, then global attention over each sequence's S*N tokens."""
        B, S = seq_shape
        n, d = z.shape[1], z.shape[2]
        z = self.block(z, f"frame{block}", frame_extra, frame_mask, mode)
        g = nn.reshape(z, (B, S * n, d))
        g = self.block(g, f"global{block}", global_extra, global_mask, mode)
        return nn.reshape(g, (B * S, n, d))

    def decode(self, z: Tensor, seq_shape: tuple[int, int]):
        """Pose head on mean-pooled tokens; dense head per patch to (ray direction, ray depth)."""
        cfg, p = self.cfg, self.params
        B, S = seq_shape
        P = cfg.patch_size
        gh, gw = cfg.grid
        f = z.shape[0]
        y = nn.layer_norm(z, p["dense.ln.g"], p["dense.ln.b"])
        y = nn.gelu(nn.matmul(y, p["dense.fc1.w"]) + p["dense.fc1.b"])
        y = nn.matmul(y, p["dense.fc2.w"]) + p["dense.fc2.b"]
        y = nn.reshape(nn.transpose(nn.reshape(y, (f, gh, gw, P, P, 4)), (0, 1, 3, 2, 4, 5)),
                       (B, S, cfg.height, cfg.width, 4))
        raw = y[..., :3] + np.array([0.0, 0.0, 1.0])
        rays = raw / nn.sqrt(nn.tsum(raw * raw, axis=-1, keepdims=True) + 1e-12)
        depth = nn.exp(y[..., 3] + math.log(3.0))

        pooled = nn.mean(z, axis=1)
        q = nn.layer_norm(pooled, p["pose.ln.g"], p["pose.ln.b"])
        q = nn.gelu(nn.matmul(q, p["pose.fc1.w"]) + p["pose.fc1.b"])
        q = nn.matmul(q, p["pose.fc2.w"]) + p["pose.fc2.b"]
        q = nn.reshape(q, (B, S, 7))
        R = quat_to_rotation(q[..., :4] + np.array([1.0, 0.0, 0.0, 0.0]))
        t = q[..., 4:]
        return rays, depth, R, t

    # -- full pass --------------------------------------------------------------

    def forward(self, images: np.ndarray, tokens: CalibrationTokenSet | None = None,
                camera_bits=None, classifier: CameraClassifier | None = None,
                mask_mode: str = "presoftmax") -> SequenceOutput:
        """Run (B, S, H, W, 3) or (S, H, W, 3) frames through the model.

        With ``tokens`` and no camera information every frame is treated as
        fisheye (no masks). ``camera_bits`` (B, S) or a ``classifier`` on the
        class token at the split layer switch masking on.
        """
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 4:
            images = images[None]
        B, S = images.shape[:2]
        L0 = tokens.start_layer if tokens is not None else cfg.classifier_layer
        x = self.patchify(images.reshape((B * S,) + images.shape[2:]))
        for layer in range(L0):
            x = self.encode(x, layer)
        cls_tok = x.data[:, 0].reshape(B, S, -1).copy()
        bits = None
        if classifier is not None:
            bits = classifier.predict(cls_tok.reshape(B * S, -1)).reshape(B, S)
        elif camera_bits is not None:
            bits = np.asarray(camera_bits, dtype=np.int64).reshape(B, S)

        if tokens is not None and bits is not None and not bits.any() and mask_mode == "presoftmax":
            # every frame perspective: masked tokens contribute nothing, so take the plain path
            # and get bitwise the plain output instead of a roundoff-level copy
            tokens = None
        K = tokens.k if tokens is not None else 0
        n_img = 1 + cfg.num_patches
        N = cfg.num_patches
        enc_mask = frame_mask = global_mask = None
        if tokens is not None and bits is not None and not bits.all():
            enc_mask = np.stack([build_frame_mask(bb, n_img, K) for bb in bits.reshape(-1)])
            frame_mask = np.stack([build_frame_mask(bb, N, K) for bb in bits.reshape(-1)])
            global_mask = np.stack([build_global_mask(bits[b], S, N, K) for b in range(B)])

        for layer in range(L0, cfg.encoder_layers):
            extra = tokens.encoder_tokens(layer) if tokens is not None else None
            x = self.encode(x, layer, extra, enc_mask, mask_mode)
        z = x[:, 1:]
        sel = np.zeros((B, S, 1, 1))
        sel[:, 0] = 1.0
        sel = sel.reshape(B * S, 1, 1)
        z = z + sel * self.params["aa.ref"] + (1.0 - sel) * self.params["aa.other"]
        for blk in range(cfg.aa_blocks):
            fe = tokens.frame[blk] if tokens is not None else None
            ge = tokens.glob[blk] if tokens is not None else None
            z = self.alternating_attention(z, blk, (B, S), fe, ge, frame_mask, global_mask, mask_mode)
        rays, depth, R, t = self.decode(z, (B, S))
        return SequenceOutput(rays, depth, R, t, cls_tok, bits)

    def class_tokens(self, images: np.ndarray, layer: int | None = None) -> np.ndarray:
        """Class token after ``layer`` encoder layers for (F, H, W, 3) frames."""
        layer = self.cfg.classifier_layer if layer is None else layer
        x = self.patchify(images)
        for i in range(layer):
            x = self.encode(x, i)
        return x.data[:, 0].copy()
