"""Checkpoint container: one nncore blob per named tensor plus a JSON manifest.

Reserved tensor names:

- ``backbone.<param>`` for backbone weights
- ``phi.encoder``, ``phi.frame``, ``phi.global`` for calibration tokens
- ``classifier.weight``, ``classifier.mean``, ``classifier.scale``
- ``optim.m.<i>``, ``optim.v.<i>`` for AdamW moments
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .calibrate import CalibrationTokenSet, CameraClassifier, MASK_MODES
from .learn import AdamWState
from .nncore import Tensor, tensor_from_bytes, tensor_to_bytes

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    backbone: Backbone
    tokens: CalibrationTokenSet | None = None
    classifier: CameraClassifier | None = None
    mask_mode: str = "presoftmax"
    optimizer: AdamWState | None = None
    iteration: int = 0
    meta: dict = field(default_factory=dict)


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".ctn"


def save_checkpoint(ckpt: Checkpoint, root) -> Path:
    if ckpt.mask_mode not in MASK_MODES:
        raise CheckpointError(f"mask_mode must be one of {MASK_MODES}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {f"backbone.{k}": v.data for k, v in ckpt.backbone.params.items()}
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "backbone_config": ckpt.backbone.cfg.to_dict(),
        "backbone_hash": ckpt.backbone.weight_hash(),
        "mask_mode": ckpt.mask_mode,
        "iteration": int(ckpt.iteration),
        "meta": ckpt.meta,
    }
    if ckpt.tokens is not None:
        tensors.update({"phi.encoder": ckpt.tokens.encoder.data, "phi.frame": ckpt.tokens.frame.data,
                        "phi.global": ckpt.tokens.glob.data})
        manifest["tokens"] = {"start_layer": ckpt.tokens.start_layer, "k": ckpt.tokens.k}
    if ckpt.classifier is not None:
        c = ckpt.classifier
        tensors["classifier.weight"] = c.weight
        if c.mean is not None:
            tensors["classifier.mean"] = c.mean
            tensors["classifier.scale"] = c.scale
        manifest["classifier"] = {"bias": c.bias, "threshold": c.threshold}
    if ckpt.optimizer is not None:
        for i, m in ckpt.optimizer.m.items():
            tensors[f"optim.m.{i}"] = m
            tensors[f"optim.v.{i}"] = ckpt.optimizer.v[i]
        manifest["optimizer"] = {"step": ckpt.optimizer.step, "slots": sorted(ckpt.optimizer.m)}
    entries = {}
    for name in sorted(tensors):
        blob = tensor_to_bytes(tensors[name])
        fname = _blob_name(name)
        (root / fname).write_bytes(blob)
        entries[name] = {"file": fname, "shape": list(np.shape(tensors[name])),
                         "sha256": hashlib.sha256(blob).hexdigest()}
    manifest["tensors"] = entries
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_checkpoint(root, verify: bool = True) -> Checkpoint:
    """Inverse of :func:`save_checkpoint`; the backbone comes back frozen."""
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    arrays = {}
    for name, e in manifest["tensors"].items():
        blob = (root / e["file"]).read_bytes()
        if verify and hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum mismatch for {name}")
        arrays[name] = tensor_from_bytes(blob).data
    params = {k[len("backbone."):]: Tensor(v, name=k[len("backbone."):])
              for k, v in arrays.items() if k.startswith("backbone.")}
    model = Backbone(BackboneConfig(**manifest["backbone_config"]), params=params)
    model.set_trainable(False)
    if verify and model.weight_hash() != manifest["backbone_hash"]:
        raise CheckpointError("backbone hash does not match manifest")
    tokens = None
    if "tokens" in manifest:
        mk = lambda n: Tensor(arrays[n].copy(), trainable=True, name=n)
        tokens = CalibrationTokenSet(mk("phi.encoder"), mk("phi.frame"), mk("phi.global"),
                                     manifest["tokens"]["start_layer"])
    classifier = None
    if "classifier" in manifest:
        c = manifest["classifier"]
        classifier = CameraClassifier(arrays["classifier.weight"], float(c["bias"]),
                                      arrays.get("classifier.mean"), arrays.get("classifier.scale"),
                                      float(c.get("threshold", 0.0)))
    optimizer = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        optimizer = AdamWState(o["step"], {i: arrays[f"optim.m.{i}"] for i in o["slots"]},
                               {i: arrays[f"optim.v.{i}"] for i in o["slots"]})
    return Checkpoint(model, tokens, classifier, manifest["mask_mode"], optimizer,
                      manifest["iteration"], manifest.get("meta", {}))
