"""Command-line entry point: ``caltok {synth,pretrain,train,classify,eval,sweep}``.

Configuration is resolved in four layers, later ones winning: built-in
defaults, the ``--config`` JSON file, ``CALTOK_*`` environment variables and
command-line flags. Nested keys use a double underscore in the environment,
e.g. ``CALTOK_TRAIN__ITERATIONS=200``; values are parsed as JSON when they
parse, else taken as strings.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .backbone import Backbone, BackboneConfig
from .calibrate import MASK_MODES, conservative_threshold
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .experiments import (DataConfig, Dataset, Variant, accuracy, aggregate, class_token_dataset,
                          evaluate, fit_classifier, hybrid_set, load_dataset, save_dataset, synthesize)
from .learn import SCHEMES, AdamWState, TrainConfig, init_tokens, pretrain_backbone, train_tokens
from .metrics import MetricReport, depth_metrics, read_reports_csv, write_aggregate_json, write_reports_csv
from .nncore import NonFiniteError
from .plotting import plot_loss_curve, plot_report_bars, plot_sweep

log = logging.getLogger("caltok")

ENV_PREFIX = "CALTOK_"
LOSS_COLUMNS = ["iteration", "total", "ray", "depth", "rot", "trans", "lr"]
SWEEP_VARIABLES = ("ratio", "k", "l0")
SWEEP_DEFAULTS = {"ratio": [0.0, 0.25, 0.5, 0.75, 1.0], "k": [1, 2, 4, 8], "l0": [0, 1, 2, 3, 4, 5]}


def default_config() -> dict:
    train = TrainConfig().to_dict()
    train.update(checkpoint_every=500, resume=None)
    return {
        "seed": 0,
        "out": "runs/out",
        "scheme": "ssl",
        "mask_mode": "presoftmax",
        "checkpoint": None,
        "data": {"dir": None, **DataConfig().to_dict()},
        "backbone": BackboneConfig(patch_size=16, height=64, width=64).to_dict(),
        "pretrain": {"iterations": 2000, "lr_start": 1e-3, "lr_end": 1e-5, "seq_len": [2, 3],
                     "batch_sequences": 1, "weight_decay": 1e-4, "threshold": 0.15, "eval_every": 500,
                     "heldout": 8},
        "train": train,
        "classify": {"l2": 1e-4, "margin": 0.5, "conservative": True},
        "eval": {"max_points": 20000},
        "sweep": {"variable": "ratio", "values": None, "length": 4},
    }


# ---------------------------------------------------------------------------
# config resolution


def _merge(base: dict, over: dict, path: str = "") -> dict:
    for k, v in over.items():
        if k not in base:
            raise KeyError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v
    return base


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, val in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_env_value(val)
    return out


def resolve_config(args: argparse.Namespace, environ=None) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        _merge(cfg, json.loads(path.read_text()))
    _merge(cfg, env_overrides(environ))
    for flag in ("seed", "scheme", "mask_mode", "out", "checkpoint"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[flag] = val
    if getattr(args, "data", None):
        cfg["data"]["dir"] = args.data
    if getattr(args, "variable", None):
        cfg["sweep"]["variable"] = args.variable
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["scheme"] not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if cfg["mask_mode"] not in MASK_MODES:
        raise ValueError(f"mask_mode must be one of {MASK_MODES}")
    if cfg["sweep"]["variable"] not in SWEEP_VARIABLES:
        raise ValueError(f"sweep variable must be one of {SWEEP_VARIABLES}")
    bb = BackboneConfig(**cfg["backbone"])
    size = cfg["data"]["image_size"]
    if (bb.height, bb.width) != (size, size):
        raise ValueError(f"data.image_size {size} does not match backbone {bb.height}x{bb.width}")
    _data_config(cfg)
    _train_config(cfg)


def _data_config(cfg: dict) -> DataConfig:
    return DataConfig(**{k: v for k, v in cfg["data"].items() if k != "dir"})


def _train_config(cfg: dict, **over) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    d = {k: v for k, v in cfg["train"].items() if k in keys}
    d.update(scheme=cfg["scheme"], seed=cfg["seed"], **over)
    return TrainConfig(**d)


def git_version() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if res.returncode == 0 and res.stdout.strip():
            return res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def write_run_header(out: Path, cfg: dict, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    (out / "version.json").write_text(json.dumps(
        {"package": __version__, "git": git_version(), "command": command}, indent=2))


# ---------------------------------------------------------------------------
# shared helpers


def get_dataset(cfg: dict) -> Dataset:
    d = cfg["data"]["dir"]
    if d:
        return load_dataset(d)
    log.info("no data.dir given; synthesising the dataset in memory")
    return synthesize(_data_config(cfg), cfg["seed"])


def require_checkpoint(cfg: dict) -> Checkpoint:
    if not cfg["checkpoint"]:
        raise FileNotFoundError("this command needs --checkpoint")
    return load_checkpoint(cfg["checkpoint"])


def write_loss_csv(path: Path, curve: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in curve:
            w.writerow([r["iteration"]] + [f"{r[k]:.10g}" for k in LOSS_COLUMNS[1:]])


def read_loss_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0]) != LOSS_COLUMNS:
        raise ValueError(f"{path} is not a loss curve")
    return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]


def _heldout_rel(samples) -> Callable[[Backbone], float]:
    def rel(model: Backbone) -> float:
        vals = []
        for smp in samples:
            st = smp.stacked()
            out = model.forward(st["rgb"])
            vals.append(depth_metrics(out.depth.data[0], st["depth"], st["valid"])[0])
        return float(np.mean(vals))
    return rel


# ---------------------------------------------------------------------------
# commands; each returns the list of declared output files


def cmd_synth(cfg: dict, out: Path) -> list[Path]:
    dc = _data_config(cfg)
    ds = synthesize(dc, cfg["seed"])
    save_dataset(ds, out, dc, cfg["seed"])
    return [out / "manifest.json"]


def cmd_pretrain(cfg: dict, out: Path) -> list[Path]:
    ds = get_dataset(cfg)
    pc = cfg["pretrain"]
    tc = TrainConfig(iterations=pc["iterations"], lr_start=pc["lr_start"], lr_end=pc["lr_end"],
                     seq_len=tuple(pc["seq_len"]), batch_sequences=pc["batch_sequences"], scheme="sl",
                     seed=cfg["seed"])
    model = Backbone(BackboneConfig(**cfg["backbone"]), seed=cfg["seed"])
    held = [s for s in ds.test[: pc["heldout"]]]
    held = [type(s)(s.frames[:2]) for s in held]
    res = pretrain_backbone(model, ds.train, tc, evaluate=_heldout_rel(held), threshold=pc["threshold"],
                            eval_every=pc["eval_every"], weight_decay=pc["weight_decay"])
    save_checkpoint(Checkpoint(model, mask_mode=cfg["mask_mode"], meta={"stage": "pretrain"}), out / "checkpoint")
    write_loss_csv(out / "loss.csv", res.curve)
    plot_loss_curve(res.curve, out / "loss.png", "backbone pretraining")
    rels = [r["heldout_rel"] for r in res.curve if "heldout_rel" in r]
    (out / "pretrain.json").write_text(json.dumps(
        {"reached": res.reached, "message": res.message, "heldout_rel": rels}, indent=2))
    return [out / "checkpoint" / "manifest.json", out / "loss.csv", out / "loss.png", out / "pretrain.json"]


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    """Token training; ``train.resume`` points at a checkpoint written by an earlier (partial) run."""
    resume = cfg["train"].get("resume")
    ckpt = load_checkpoint(resume) if resume else require_checkpoint(cfg)
    ds = get_dataset(cfg)
    tc = _train_config(cfg)
    corpus = ds.train_fisheye if tc.scheme == "slplus" else ds.train
    start = ckpt.iteration if resume else 0
    if resume and ckpt.tokens is None:
        raise ValueError(f"{resume} holds no calibration tokens to resume from")
    tokens = ckpt.tokens if resume else init_tokens(ckpt.backbone, tc)
    state = (ckpt.optimizer if resume else None) or AdamWState()
    curve: list[dict] = []
    if resume and (Path(resume).parent / "loss.csv").exists():
        curve = [r for r in read_loss_csv(Path(resume).parent / "loss.csv") if r["iteration"] < start]
    every = max(1, int(cfg["train"].get("checkpoint_every") or tc.iterations))

    def on_step(it: int, row: dict) -> None:
        curve.append(row)
        if (it + 1) % every == 0 and it + 1 < tc.iterations:
            _save_train(ckpt, tokens, state, it + 1, cfg, out)
            write_loss_csv(out / "loss.csv", curve)

    train_tokens(ckpt.backbone, corpus, tc, tokens=tokens, state=state, start_iter=start, on_step=on_step)
    _save_train(ckpt, tokens, state, tc.iterations, cfg, out)
    write_loss_csv(out / "loss.csv", curve)
    plot_loss_curve(curve, out / "loss.png", f"token training ({tc.scheme})")
    return [out / "checkpoint" / "manifest.json", out / "loss.csv", out / "loss.png"]


def _save_train(ckpt: Checkpoint, tokens, state, iteration: int, cfg: dict, out: Path) -> None:
    meta = dict(ckpt.meta, stage="train", scheme=cfg["scheme"], train=_train_config(cfg).to_dict())
    save_checkpoint(Checkpoint(ckpt.backbone, tokens, ckpt.classifier, cfg["mask_mode"], state, iteration, meta),
                    out / "checkpoint")


def cmd_classify(cfg: dict, out: Path) -> list[Path]:
    ckpt = require_checkpoint(cfg)
    ds = get_dataset(cfg)
    t0 = time.perf_counter()
    clf = fit_classifier(ckpt.backbone, ds.train, ds.train_fisheye, l2=cfg["classify"]["l2"])
    fit_seconds = time.perf_counter() - t0
    x, y = class_token_dataset(ckpt.backbone, ds.test + ds.test_fisheye)
    summary = {"frames": int(len(y)), "accuracy": accuracy(clf, x, y), "fit_seconds": fit_seconds}
    if cfg["classify"]["conservative"]:
        xp, _ = class_token_dataset(ckpt.backbone, ds.train)
        clf = conservative_threshold(clf, xp, cfg["classify"]["margin"])
        pred = clf.predict(x)
        summary.update(conservative_accuracy=float(np.mean(pred == y)),
                       perspective_as_fisheye=int(np.sum((pred == 1) & (y == 0))),
                       fisheye_recall=float(np.mean(pred[y == 1] == 1)) if np.any(y == 1) else float("nan"))
    save_checkpoint(Checkpoint(ckpt.backbone, ckpt.tokens, clf, cfg["mask_mode"], ckpt.optimizer,
                               ckpt.iteration, dict(ckpt.meta, classifier=summary)), out / "checkpoint")
    (out / "classifier.json").write_text(json.dumps(summary, indent=2))
    return [out / "checkpoint" / "manifest.json", out / "classifier.json"]


def _variants(ckpt: Checkpoint, mode: str) -> list[Variant]:
    vs = [Variant("plain", mask_mode=mode)]
    if ckpt.tokens is not None:
        bits = "classifier" if ckpt.classifier is not None else "truth"
        vs.append(Variant("calibrated", ckpt.tokens, bits, ckpt.classifier, mode))
    return vs


def cmd_eval(cfg: dict, out: Path) -> list[Path]:
    ckpt = require_checkpoint(cfg)
    ds = get_dataset(cfg)
    lengths = _data_config(cfg).eval_lengths
    rows = []
    for v in _variants(ckpt, cfg["mask_mode"]):
        for split in ("test", "test_fisheye"):
            rows += evaluate(ckpt.backbone, ds.split(split), v, lengths, split, cfg["eval"]["max_points"])
    write_reports_csv(out / "reports.csv", rows)
    groups = aggregate(rows)
    write_aggregate_json(out / "aggregate.json", groups)
    plot_report_bars(groups, out / "report.png")
    return [out / "reports.csv", out / "aggregate.json", out / "report.png"]


def _report_row(series: str, variable: str, value, rep: MetricReport) -> dict:
    return {"series": series, variable: value, **rep.as_dict()}


def cmd_sweep(cfg: dict, out: Path) -> list[Path]:
    sw = cfg["sweep"]
    var = sw["variable"]
    values = sw["values"] if sw["values"] is not None else SWEEP_DEFAULTS[var]
    ckpt = require_checkpoint(cfg)
    ds = get_dataset(cfg)
    L, mode, mp = sw["length"], cfg["mask_mode"], cfg["eval"]["max_points"]
    rows: list[dict] = []
    if var == "ratio":
        if ckpt.tokens is None:
            raise ValueError("the ratio sweep needs a checkpoint with calibration tokens")
        variants = [Variant("masked", ckpt.tokens, "truth", mask_mode=mode),
                    Variant("unmasked", ckpt.tokens, "none", mask_mode=mode),
                    Variant("plain", mask_mode=mode)]
        for r in values:
            samples = hybrid_set(ds.test, ds.test_fisheye, float(r), L, seed=cfg["seed"])
            for v in variants:
                rep = MetricReport.mean([x for _, x in evaluate(ckpt.backbone, samples, v, [L], max_points=mp)])
                rows.append(_report_row(v.name, var, r, rep))
    else:
        fish = [type(s)(s.frames[:L]) for s in ds.test_fisheye]
        base = MetricReport.mean([x for _, x in evaluate(ckpt.backbone, fish, Variant("plain"), [L], max_points=mp)])
        corpus = ds.train_fisheye if cfg["scheme"] == "slplus" else ds.train
        for val in values:
            tc = _train_config(cfg, tokens_per_layer=int(val)) if var == "k" else _train_config(cfg)
            model = ckpt.backbone
            if var == "l0":
                model = _with_start_layer(ckpt.backbone, int(val))
            res = train_tokens(model, corpus, tc)
            rep = MetricReport.mean([x for _, x in evaluate(model, fish, Variant("tokens", res.tokens), [L],
                                                            max_points=mp)])
            rows.append(_report_row("tokens", var, val, rep))
            rows.append(_report_row("plain", var, val, base))
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["series", var] + MetricReport.columns())
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    plot_sweep(rows, var, out / "sweep.png")
    return [out / "sweep.csv", out / "sweep.png"]


def _with_start_layer(model: Backbone, l0: int) -> Backbone:
    """Same weights with the token start (and class-token) layer moved to ``l0``."""
    cfg = BackboneConfig(**dict(model.cfg.to_dict(), classifier_layer=l0))
    m = Backbone(cfg, params=model.params)
    return m


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
            "classify": cmd_classify, "eval": cmd_eval, "sweep": cmd_sweep}


# ---------------------------------------------------------------------------
# output validation


def output_ok(path: Path) -> bool:
    """True when ``path`` exists and parses according to its type."""
    path = Path(path)
    if not path.is_file():
        return False
    try:
        if path.suffix == ".json":
            doc = json.loads(path.read_text())
            if path.name == "manifest.json" and "backbone_hash" in doc:
                load_checkpoint(path.parent)
            elif path.name == "manifest.json" and "splits" in doc:
                load_dataset(path.parent)
        elif path.name == "reports.csv":
            read_reports_csv(path)
        elif path.name == "loss.csv":
            read_loss_csv(path)
        elif path.suffix == ".csv":
            with path.open(newline="") as fh:
                if not list(csv.DictReader(fh)):
                    return False
        elif path.suffix == ".png":
            from PIL import Image
            with Image.open(path) as im:
                im.verify()
    except Exception as e:  # any parse failure means the output is not usable
        log.error("output %s does not parse: %s", path, e)
        return False
    return True


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caltok", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"caltok {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--scheme", choices=SCHEMES)
        s.add_argument("--mask-mode", dest="mask_mode", choices=MASK_MODES)
        s.add_argument("--out", help="output directory")
        s.add_argument("--data", help="dataset directory written by `synth`")
        s.add_argument("--checkpoint", help="input checkpoint directory")
        if name == "sweep":
            s.add_argument("--variable", choices=SWEEP_VARIABLES)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args, environ)
    except (ValueError, KeyError, FileNotFoundError, TypeError) as e:
        print(f"caltok: bad configuration: {e}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    write_run_header(out, cfg, args.command)
    try:
        outputs = COMMANDS[args.command](copy.deepcopy(cfg), out)
    except (FileNotFoundError, ValueError, NonFiniteError, OSError) as e:
        print(f"caltok {args.command}: {e}", file=sys.stderr)
        return 1
    outputs = [out / "config.json", out / "version.json"] + outputs
    bad = [str(p) for p in outputs if not output_ok(p)]
    if bad:
        print(f"caltok {args.command}: missing or unreadable outputs: {', '.join(bad)}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "outputs": [str(p) for p in outputs]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
