"""Calibration tokens, camera-type classification and masked attention.

Calibration tokens are appended after the image tokens of a layer, attended
jointly, then discarded. Masks keep them away from perspective frames: an
image row of a perspective frame never reads a calibration column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .nncore import Tensor

MASK_MODES = ("presoftmax", "literal")


@dataclass
class CalibrationTokenSet:
    """Per-layer token banks: encoder layers after ``start_layer``, frame and global AA layers."""

    encoder: Tensor  # (L1 - L0, K, d)
    frame: Tensor    # (L2, K, d)
    glob: Tensor     # (L2, K, d)
    start_layer: int

    @classmethod
    def init(cls, rng: np.random.Generator, encoder_layers: int, aa_blocks: int, start_layer: int,
             k: int, dim: int, std: float = 1e-6) -> "CalibrationTokenSet":
        if not 0 <= start_layer <= encoder_layers:
            raise ValueError("start_layer must lie in [0, encoder_layers]")
        mk = lambda n, name: Tensor(rng.normal(0.0, std, size=(n, k, dim)), trainable=True, name=name)
        return cls(mk(encoder_layers - start_layer, "phi.encoder"), mk(aa_blocks, "phi.frame"),
                   mk(aa_blocks, "phi.global"), start_layer)

    @property
    def k(self) -> int:
        return self.frame.shape[1]

    @property
    def tensors(self) -> list[Tensor]:
        return [self.encoder, self.frame, self.glob]

    @property
    def count(self) -> int:
        return sum(t.shape[0] * t.shape[1] for t in self.tensors)

    def encoder_tokens(self, layer: int) -> Tensor | None:
        """Bank for 0-based encoder layer ``layer`` or None below the start layer."""
        if layer < self.start_layer:
            return None
        return self.encoder[layer - self.start_layer]

    def zeros_like(self) -> "CalibrationTokenSet":
        z = lambda t: Tensor(np.zeros(t.shape), trainable=True, name=t.name)
        return CalibrationTokenSet(z(self.encoder), z(self.frame), z(self.glob), self.start_layer)

    def copy(self) -> "CalibrationTokenSet":
        c = lambda t: Tensor(t.data.copy(), trainable=True, name=t.name)
        return CalibrationTokenSet(c(self.encoder), c(self.frame), c(self.glob), self.start_layer)


# ---------------------------------------------------------------------------
# classifier


@dataclass
class CameraClassifier:
    """Logistic regression on the class token; 1 = fisheye."""

    weight: np.ndarray
    bias: float
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    threshold: float = 0.0  # on the logit; 0 is the usual p > 0.5 rule

    def _features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x

    def logits(self, class_tokens: np.ndarray) -> np.ndarray:
        return self._features(class_tokens) @ self.weight + self.bias

    def prob(self, class_tokens: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(class_tokens)))

    def predict(self, class_tokens: np.ndarray) -> np.ndarray:
        return (self.logits(class_tokens) > self.threshold).astype(np.int64)


def classify_camera(class_token: np.ndarray, classifier: CameraClassifier) -> int:
    return int(classifier.predict(np.asarray(class_token)[None])[0])


def train_classifier(features: np.ndarray, labels: np.ndarray, l2: float = 1e-4,
                     max_iter: int = 500, tol: float = 1e-10) -> CameraClassifier:
    """Logistic regression fitted by gradient descent with a Newton-sized step.

    Features are standardised first; training stops once the gradient norm
    falls below ``tol``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-8
    z = np.concatenate([(x - mu) / sd, np.ones((len(x), 1))], axis=1)
    w = np.zeros(z.shape[1])
    reg = np.full(z.shape[1], l2)
    reg[-1] = 0.0
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-np.clip(z @ w, -50, 50)))
        grad = z.T @ (p - y) / len(y) + reg * w
        if np.linalg.norm(grad) < tol:
            break
        hess = (z * (p * (1 - p))[:, None]).T @ z / len(y) + np.diag(reg + 1e-9)
        w -= np.linalg.solve(hess, grad)
    return CameraClassifier(w[:-1].copy(), float(w[-1]), mu, sd)


def conservative_threshold(classifier: CameraClassifier, perspective_tokens: np.ndarray,
                           margin: float = 0.5) -> CameraClassifier:
    """Copy of ``classifier`` whose logit threshold sits ``margin`` above every perspective frame.

    A perspective frame read as fisheye receives calibration tokens and loses
    the bitwise match with the plain model; a fisheye frame read as
    perspective only loses the adaptation. The shifted threshold trades the
    second error for the first.
    """
    top = float(np.max(classifier.logits(perspective_tokens)))
    return CameraClassifier(classifier.weight, classifier.bias, classifier.mean, classifier.scale,
                            max(0.0, top + margin))


# ---------------------------------------------------------------------------
# masks


def build_frame_mask(fisheye: int, n: int, k: int) -> np.ndarray:
    """(N+K) x (N+K) mask: image rows see calibration columns only for fisheye frames."""
    if n < 1 or k < 1:
        raise ValueError("n and k must be >= 1")
    m = np.ones((n + k, n + k), dtype=bool)
    m[:n, n:] = bool(fisheye)
    return m


def build_global_mask(bits, s: int, n: int, k: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool)
    if bits.shape != (s,):
        raise ValueError("need one camera bit per frame")
    m = np.ones((s * n + k, s * n + k), dtype=bool)
    m[: s * n, s * n:] = np.repeat(bits, n)[:, None]
    return m


# ---------------------------------------------------------------------------
# attention


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                     mode: str = "presoftmax") -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` broadcasts against the (..., Tq, Tk) weights; see
    :func:`caltok.nncore.softmax_rows` for the two masking semantics.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"mode must be one of {MASK_MODES}")
    if mask is not None and mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ValueError(f"mask {mask.shape} does not match {q.shape[-2]}x{k.shape[-2]} tokens")
    scores = nn.matmul(q, nn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None and mask.all():
        mask = None
    w = nn.softmax_rows(scores, mask, mode)
    return nn.matmul(w, v)


def forward_calibrated(model, images, tokens: CalibrationTokenSet | None,
                       classifier: CameraClassifier, mode: str = "presoftmax"):
    """Plain layers up to the classifier layer, then tokens gated by predicted camera types."""
    return model.forward(images, tokens=tokens, classifier=classifier, mask_mode=mode)
