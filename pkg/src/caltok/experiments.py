"""Dataset synthesis, prediction and evaluation runners shared by the CLI and the acceptance tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import Backbone
from .calibrate import CalibrationTokenSet, CameraClassifier, train_classifier
from .camera import PinholeCamera, sample_distortion
from .metrics import MetricReport, sequence_report
from .scenegen import (SceneSample, default_camera, generate_scene, load_sample, render, sample_sequence,
                       save_sample)

log = logging.getLogger(__name__)

SPLITS = ("train", "train_fisheye", "test", "test_fisheye")


@dataclass
class DataConfig:
    image_size: int = 64
    fov_deg: float = 90.0
    complexity: int = 2
    train_scenes: int = 60
    test_scenes: int = 10
    sequences_per_scene: int = 2
    train_length: tuple[int, int] = (2, 4)
    test_length: int = 16
    eval_lengths: tuple[int, ...] = (4, 8, 16)

    def __post_init__(self):
        self.train_length = tuple(self.train_length)
        self.eval_lengths = tuple(self.eval_lengths)
        if self.train_scenes < 1 or self.test_scenes < 1 or self.sequences_per_scene < 1:
            raise ValueError("scene and sequence counts must be >= 1")
        if max(self.eval_lengths) > self.test_length:
            raise ValueError("eval lengths cannot exceed the test sequence length")

    def camera(self) -> PinholeCamera:
        return default_camera(self.image_size, self.fov_deg)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """Perspective sequences and their fisheye twins (same poses, natively rendered)."""

    train: list[SceneSample]
    train_fisheye: list[SceneSample]
    test: list[SceneSample]
    test_fisheye: list[SceneSample]
    scenes: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[SceneSample]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


def _fisheye_twin(scene, sample: SceneSample, rng: np.random.Generator) -> SceneSample:
    cam = sample_distortion(rng, sample.frames[0].camera)
    return SceneSample([render(scene, cam, f.pose) for f in sample.frames])


def synthesize(cfg: DataConfig, seed: int = 0) -> Dataset:
    """Scenes ``0..train_scenes-1`` feed training, the rest testing; no scene is shared."""
    cam = cfg.camera()
    n_scenes = cfg.train_scenes + cfg.test_scenes
    streams = np.random.SeedSequence(seed).spawn(n_scenes)
    out = {k: [] for k in SPLITS}
    scenes = {"train": [], "test": []}
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        scene = generate_scene(rng, cfg.complexity)
        test = i >= cfg.train_scenes
        length = (cfg.test_length, cfg.test_length) if test else cfg.train_length
        prefix = "test" if test else "train"
        scenes[prefix].append(i)
        for _ in range(cfg.sequences_per_scene):
            smp = sample_sequence(scene, rng, length_range=length, camera=cam)
            out[prefix].append(smp)
            out[prefix + "_fisheye"].append(_fisheye_twin(scene, smp, rng))
    return Dataset(**out, scenes=scenes)


def save_dataset(ds: Dataset, root, cfg: DataConfig | None = None, seed: int | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    per = 1
    if ds.scenes.get("train"):
        per = max(1, len(ds.train) // len(ds.scenes["train"]))
    index: dict = {"version": 1, "scenes": ds.scenes, "splits": {}}
    if cfg is not None:
        index["config"] = cfg.to_dict()
    if seed is not None:
        index["seed"] = seed
    for name in SPLITS:
        group = "test" if name.startswith("test") else "train"
        ids = ds.scenes.get(group, [])
        rel = []
        for j, smp in enumerate(ds.split(name)):
            scene = ids[j // per] if ids else j
            sub = f"{name}/scene_{scene:04d}_seq_{j % per:02d}"
            save_sample(smp, root / sub)
            rel.append(sub)
        index["splits"][name] = rel
    (root / "manifest.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    index = json.loads(path.read_text())
    splits = {name: [load_sample(root / rel) for rel in index["splits"][name]] for name in SPLITS}
    return Dataset(**splits, scenes=index.get("scenes", {}))


# ---------------------------------------------------------------------------
# prediction and evaluation


def truncate(sample: SceneSample, length: int) -> SceneSample:
    return SceneSample(sample.frames[:length])


def predict(model: Backbone, sample: SceneSample, tokens: CalibrationTokenSet | None = None,
            camera_bits=None, classifier: CameraClassifier | None = None,
            mask_mode: str = "presoftmax") -> dict:
    """Numpy prediction dict for one sequence in the layout :func:`sequence_report` expects."""
    rgb = np.stack([f.rgb for f in sample.frames])
    out = model.forward(rgb, tokens=tokens, camera_bits=camera_bits, classifier=classifier,
                        mask_mode=mask_mode)
    return {"rays": out.rays.data[0], "depth": out.depth.data[0], "R": out.R.data[0],
            "t": out.t.data[0], "bits": None if out.camera_bits is None else out.camera_bits[0]}


def gt_dict(sample: SceneSample) -> dict:
    return sample.stacked()


@dataclass
class Variant:
    """How a model is run for evaluation.

    ``bits`` is ``none`` (tokens on every frame), ``truth`` (masks from the
    ground-truth camera types) or ``classifier``.
    """

    name: str
    tokens: CalibrationTokenSet | None = None
    bits: str = "none"
    classifier: CameraClassifier | None = None
    mask_mode: str = "presoftmax"

    def run(self, model: Backbone, sample: SceneSample) -> dict:
        if self.bits == "truth":
            return predict(model, sample, self.tokens, camera_bits=sample.camera_types[None],
                           mask_mode=self.mask_mode)
        if self.bits == "classifier":
            if self.classifier is None:
                raise ValueError(f"variant {self.name} needs a classifier")
            return predict(model, sample, self.tokens, classifier=self.classifier, mask_mode=self.mask_mode)
        return predict(model, sample, self.tokens, mask_mode=self.mask_mode)


def evaluate(model: Backbone, samples: Sequence[SceneSample], variant: Variant,
             lengths: Sequence[int] | None = None, split: str = "", max_points: int = 20000
             ) -> list[tuple[dict, MetricReport]]:
    """One report per (sequence, length); sequences shorter than a length are skipped."""
    rows = []
    for i, smp in enumerate(samples):
        for L in (lengths or [len(smp)]):
            if len(smp) < L:
                continue
            sub = truncate(smp, L)
            rep = sequence_report(variant.run(model, sub), gt_dict(sub), max_points=max_points)
            rows.append(({"split": split, "variant": variant.name, "sequence": i, "length": L}, rep))
    return rows


def aggregate(rows: Sequence[tuple[dict, MetricReport]], by: Sequence[str] = ("split", "variant", "length")
              ) -> dict[str, MetricReport]:
    groups: dict[str, list[MetricReport]] = {}
    for key, rep in rows:
        name = "/".join(f"{k}={key[k]}" for k in by)
        groups.setdefault(name, []).append(rep)
    return {k: MetricReport.mean(v) for k, v in groups.items()}


# ---------------------------------------------------------------------------
# mixed camera sequences and classifier data


def hybrid(persp: SceneSample, fish: SceneSample, ratio: float, rng: np.random.Generator) -> SceneSample:
    """Twin sequences mixed so ``round(ratio * S)`` frames stay perspective."""
    if len(persp) != len(fish):
        raise ValueError("twin sequences must have the same length")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    S = len(persp)
    keep = set(rng.choice(S, size=int(round(ratio * S)), replace=False).tolist())
    return SceneSample([persp.frames[s] if s in keep else fish.frames[s] for s in range(S)])


def hybrid_set(persp: Sequence[SceneSample], fish: Sequence[SceneSample], ratio: float,
               length: int, seed: int = 0) -> list[SceneSample]:
    rng = np.random.default_rng(seed)
    return [hybrid(truncate(p, length), truncate(f, length), ratio, rng) for p, f in zip(persp, fish)]


def class_token_dataset(model: Backbone, samples: Sequence[SceneSample]) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for smp in samples:
        xs.append(model.class_tokens(np.stack([f.rgb for f in smp.frames])))
        ys.append(smp.camera_types)
    return np.concatenate(xs), np.concatenate(ys)


def fit_classifier(model: Backbone, persp: Sequence[SceneSample], fish: Sequence[SceneSample],
                   l2: float = 1e-4) -> CameraClassifier:
    x, y = class_token_dataset(model, list(persp) + list(fish))
    return train_classifier(x, y, l2=l2)


def accuracy(classifier: CameraClassifier, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(classifier.predict(x) == y))
