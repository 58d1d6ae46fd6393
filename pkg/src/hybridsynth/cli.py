"""Command-line entry points.

Every command reads one YAML run config (flags override single keys) and
works inside a shared output root::

    hybridsynth prepare-conditions --config run.yaml
    hybridsynth train --config run.yaml
    hybridsynth generate --config run.yaml --decoders ahd
    hybridsynth evaluate-downstream --config run.yaml
    hybridsynth report --config run.yaml

Exit codes: 0 success, 1 runtime failure, 2 invalid config, 3 missing
prerequisite (the message names the command that produces it).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .conditioning import get_depth_estimator, get_edge_extractor
from .core import Decoder, GenerationMode, HybridSynthError, derive_rng
from .ingest import ConditionCache, DatasetIndex, DatasetKind, atomic_write_text, cache_version, load_samples, scan, \
    split_base_set
from .manipulate import GenerationConfig, ManipulationKind, generate_dataset, read_manifest
from .network import GeneratorConfig, load_checkpoint
from .training import LossWeights, TrainConfig, finetune_depth_level, train

log = logging.getLogger("hybridsynth")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
CACHE_ENV = "HYBRIDSYNTH_CACHE"
RUN_MANIFEST = "run_manifest.json"


class ConfigValidationError(HybridSynthError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class MissingPrerequisite(HybridSynthError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"missing {path}; run `hybridsynth {command}` first")
        self.path, self.command = path, command


# -- config --------------------------------------------------------------------

DEFAULTS: dict = {
    "seed": 0,
    "mode": "rgb",
    "output": "runs/toy",
    "dataset": {
        "root": "toy_data", "kind": "mvtec_layout", "categories": None, "resolution": 64,
        "base_fraction": 1 / 3, "edge": "gradient", "depth": "luminance", "workers": 1,
    },
    "generator": {"base_channels": 16, "resnet_blocks": 2, "max_channels": 128,
                  "disc_base_channels": 16, "disc_scales": 2, "disc_layers": 3},
    "training": {"steps": 200, "epochs": None, "batch_size": 4, "lr": 2e-4, "decay_start": 0.5,
                 "perceptual_weight": 1.0, "adversarial_weight": 1.0, "decoders": "both",
                 "finetune_steps": 100},
    "generation": {"count_per_decoder": 20, "decoders": "both", "manipulations": ["merge", "remove", "replace", "tps"],
                   "area": [0.005, 0.10], "alpha": 0.5, "foreground": "auto", "appearance": "target"},
    "metrics": {"is_splits": 10, "is_classes": 10, "tnr": 0.95, "references": 100},
    "downstream": {"steps": 200, "batch_size": 8, "lr": 1e-3, "normal_ratio": 1.0, "classifier": True},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _decoders(value) -> tuple[Decoder, ...]:
    if value == "both":
        return (Decoder.AHD, Decoder.AHE)
    if isinstance(value, str):
        value = [value]
    return tuple(Decoder(v) for v in value)


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigValidationError([f"config: cannot read {path}: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigValidationError(["config: top level must be a mapping"])
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def __getitem__(self, key):
        return self.data[key]

    def set(self, dotted: str, value):
        node = self.data
        *path, last = dotted.split(".")
        for p in path:
            node = node.setdefault(p, {})
        node[last] = value

    def validate(self):
        d, errors = self.data, []

        def need(cond, msg):
            if not cond:
                errors.append(msg)

        unknown = set(d) - set(DEFAULTS)
        need(not unknown, f"unknown top-level keys: {sorted(unknown)}")
        for section in ("dataset", "generator", "training", "generation", "metrics", "downstream"):
            if not isinstance(d.get(section), dict):
                errors.append(f"{section}: must be a mapping")
                continue
            extra = set(d[section]) - set(DEFAULTS[section])
            need(not extra, f"{section}: unknown keys {sorted(extra)}")
        if errors:
            raise ConfigValidationError(errors)
        need(isinstance(d["seed"], int) and d["seed"] >= 0, "seed: must be a nonnegative integer")
        need(d["mode"] in ("rgb", "depth"), "mode: must be 'rgb' or 'depth'")
        ds = d["dataset"]
        need(ds["kind"] in [k.value for k in DatasetKind], f"dataset.kind: one of {[k.value for k in DatasetKind]}")
        need(isinstance(ds["resolution"], int) and ds["resolution"] >= 16 and ds["resolution"] % 8 == 0,
             "dataset.resolution: integer >= 16 divisible by 8")
        need(isinstance(ds["base_fraction"], (int, float)) and 0 < ds["base_fraction"] < 1,
             "dataset.base_fraction: must be in (0, 1)")
        need(ds["categories"] is None or isinstance(ds["categories"], list), "dataset.categories: list or null")
        g = d["generator"]
        for k in ("base_channels", "resnet_blocks", "max_channels", "disc_base_channels", "disc_scales",
                  "disc_layers"):
            need(isinstance(g[k], int) and g[k] >= 1, f"generator.{k}: positive integer")
        t = d["training"]
        need(t["steps"] is not None or t["epochs"] is not None, "training: steps or epochs must be set")
        for k in ("steps", "epochs", "finetune_steps"):
            need(t[k] is None or (isinstance(t[k], int) and t[k] >= 1), f"training.{k}: positive integer or null")
        need(isinstance(t["batch_size"], int) and t["batch_size"] >= 1, "training.batch_size: positive integer")
        need(isinstance(t["lr"], (int, float)) and t["lr"] > 0, "training.lr: must be > 0")
        need(isinstance(t["decay_start"], (int, float)) and 0 <= t["decay_start"] < 1,
             "training.decay_start: must be in [0, 1)")
        for k in ("perceptual_weight", "adversarial_weight"):
            need(isinstance(t[k], (int, float)) and t[k] >= 0, f"training.{k}: must be >= 0")
        gen = d["generation"]
        for section, key in (("training", "decoders"), ("generation", "decoders")):
            try:
                need(len(_decoders(d[section][key])) > 0, f"{section}.{key}: at least one decoder")
            except (ValueError, TypeError):
                errors.append(f"{section}.{key}: 'ahd', 'ahe', 'both' or a list of them")
        try:
            kinds = [ManipulationKind(k) for k in gen["manipulations"]]
            need(len(kinds) > 0, "generation.manipulations: at least one kind")
        except (ValueError, TypeError):
            errors.append(f"generation.manipulations: subset of {[k.value for k in ManipulationKind]}")
        need(isinstance(gen["count_per_decoder"], int) and gen["count_per_decoder"] >= 1,
             "generation.count_per_decoder: positive integer")
        area = gen["area"]
        need(isinstance(area, list) and len(area) == 2 and 0 < area[0] <= area[1] < 1,
             "generation.area: [lo, hi] with 0 < lo <= hi < 1")
        need(isinstance(gen["alpha"], (int, float)) and 0 <= gen["alpha"] <= 1, "generation.alpha: in [0, 1]")
        need(gen["foreground"] in ("auto", "full"), "generation.foreground: 'auto' or 'full'")
        need(gen["appearance"] in ("target", "normal", "anomaly"),
             "generation.appearance: 'target', 'normal' or 'anomaly'")
        m = d["metrics"]
        need(isinstance(m["is_splits"], int) and m["is_splits"] >= 1, "metrics.is_splits: positive integer")
        need(isinstance(m["is_classes"], int) and m["is_classes"] >= 2, "metrics.is_classes: integer >= 2")
        need(isinstance(m["tnr"], (int, float)) and 0 < m["tnr"] < 1, "metrics.tnr: in (0, 1)")
        need(isinstance(m["references"], int) and m["references"] >= 1, "metrics.references: positive integer")
        ds2 = d["downstream"]
        for k in ("steps", "batch_size"):
            need(isinstance(ds2[k], int) and ds2[k] >= 1, f"downstream.{k}: positive integer")
        need(isinstance(ds2["lr"], (int, float)) and ds2["lr"] > 0, "downstream.lr: must be > 0")
        need(isinstance(ds2["normal_ratio"], (int, float)) and ds2["normal_ratio"] >= 0,
             "downstream.normal_ratio: must be >= 0")
        if errors:
            raise ConfigValidationError(errors)
        return self

    # typed views
    @property
    def out(self) -> Path:
        return Path(self.data["output"])

    def generator_config(self, mode=None) -> GeneratorConfig:
        g = self.data["generator"]
        return GeneratorConfig(self.data["dataset"]["resolution"], 4, g["base_channels"], g["resnet_blocks"],
                               g["max_channels"], GenerationMode(mode or self.data["mode"]), g["disc_base_channels"],
                               g["disc_scales"], g["disc_layers"])

    def train_config(self, steps=None) -> TrainConfig:
        t = self.data["training"]
        return TrainConfig(steps=steps or t["steps"], epochs=None if (steps or t["steps"]) else t["epochs"],
                           batch_size=t["batch_size"], lr=float(t["lr"]), decay_start=float(t["decay_start"]),
                           seed=self.data["seed"],
                           weights=LossWeights(float(t["perceptual_weight"]), float(t["adversarial_weight"])),
                           groups=_decoders(t["decoders"]))

    def generation_config(self) -> GenerationConfig:
        g = self.data["generation"]
        return GenerationConfig(seed=self.data["seed"], count_per_decoder=g["count_per_decoder"],
                                decoders=_decoders(g["decoders"]),
                                kinds=tuple(ManipulationKind(k) for k in g["manipulations"]),
                                area=tuple(g["area"]), alpha=float(g["alpha"]), foreground=g["foreground"],
                                appearance=g["appearance"])


# -- run manifest --------------------------------------------------------------

def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(root: Path) -> str:
    """Content hash of every file below ``root`` (relative paths included)."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(file_hash(p).encode())
    return h.hexdigest()


def record_command(cfg: RunConfig, command: str, inputs: dict, outputs: list[Path], seconds: float):
    path = cfg.out / RUN_MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["config"] = cfg.to_dict()
    manifest["commands"][command] = {
        "inputs": inputs,
        "outputs": {str(p.relative_to(cfg.out)): file_hash(p) for p in outputs if p.is_file()},
        "seconds": round(seconds, 3),
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(path, command)
    return path


# -- shared loading ------------------------------------------------------------

def _cache(cfg: RunConfig, edge, depth) -> ConditionCache:
    root = Path(os.environ.get(CACHE_ENV) or cfg.out / "cache")
    return ConditionCache(root, cache_version(edge, depth, cfg["dataset"]["resolution"]))


def _extractors(cfg: RunConfig):
    ds = cfg["dataset"]
    return get_edge_extractor(ds["edge"]), get_depth_estimator(ds["depth"])


def _load_split(cfg: RunConfig) -> tuple[DatasetIndex, DatasetIndex]:
    prep = cfg.out / "prepare"
    _require(prep / "base.json", "prepare-conditions")
    base = DatasetIndex.from_dict(json.loads((prep / "base.json").read_text()))
    held = DatasetIndex.from_dict(json.loads((prep / "held.json").read_text()))
    return base, held


def _samples(cfg: RunConfig, refs) -> dict:
    edge, depth = _extractors(cfg)
    loaded = load_samples(refs, edge, depth, cfg["dataset"]["resolution"], _cache(cfg, edge, depth),
                          cfg["dataset"]["workers"])
    return {s.id: s for s in loaded}


def _checkpoint_path(cfg: RunConfig, mode: str) -> Path:
    return cfg.out / "train" / mode / "checkpoint.pt"


def _manifest_path(cfg: RunConfig, mode: str) -> Path:
    return cfg.out / "generate" / mode / "manifest.jsonl"


# -- commands --------------------------------------------------------------------

def cmd_make_toy(cfg: RunConfig, args) -> list[Path]:
    from .toydata import make_toy_category

    root = Path(cfg["dataset"]["root"])
    cat = make_toy_category(root, size=args.size, seed=cfg["seed"])
    return sorted(p for p in cat.rglob("*") if p.is_file())


def cmd_prepare(cfg: RunConfig, args) -> list[Path]:
    ds = cfg["dataset"]
    index = scan(ds["root"], ds["kind"])
    if ds["categories"]:
        index.categories = [c for c in index.categories if c.name in set(ds["categories"])]
    base, held = split_base_set(index, ds["base_fraction"], cfg["seed"])
    samples = _samples(cfg, index.refs())
    prep = cfg.out / "prepare"
    prep.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, idx in (("index", index), ("base", base), ("held", held)):
        path = prep / f"{name}.json"
        atomic_write_text(path, json.dumps(idx.to_dict(), indent=1, sort_keys=True))
        outputs.append(path)
    summary = {"samples": len(samples), "categories": [c.name for c in index.categories],
               "base": len(base.refs()), "held": len(held.refs())}
    atomic_write_text(prep / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return outputs + [prep / "summary.json"]


def cmd_train(cfg: RunConfig, args) -> list[Path]:
    if cfg["mode"] == "depth":
        return cmd_finetune(cfg, args)
    base, _ = _load_split(cfg)
    refs = [r for c in base.categories for r in c.train if r.is_normal]
    samples = list(_samples(cfg, refs).values())
    out = _checkpoint_path(cfg, "rgb").parent
    train(samples, GenerationMode.RGB_LEVEL, cfg.generator_config("rgb"), cfg.train_config(), out)
    return [out / "checkpoint.pt", out / "train_log.jsonl"]


def cmd_finetune(cfg: RunConfig, args) -> list[Path]:
    rgb = load_checkpoint(_require(_checkpoint_path(cfg, "rgb"), "train --mode rgb"), GenerationMode.RGB_LEVEL)
    base, _ = _load_split(cfg)
    refs = [r for c in base.categories for r in c.train if r.is_normal]
    samples = list(_samples(cfg, refs).values())
    out = _checkpoint_path(cfg, "depth").parent
    finetune_depth_level(rgb, samples, cfg.train_config(cfg["training"]["finetune_steps"]), out)
    return [out / "checkpoint.pt", out / "train_log.jsonl"]


def cmd_generate(cfg: RunConfig, args) -> list[Path]:
    mode = cfg["mode"]
    producer = "train --mode rgb" if mode == "rgb" else "finetune-depth"
    ckpt = load_checkpoint(_require(_checkpoint_path(cfg, mode), producer), GenerationMode(mode))
    base, _ = _load_split(cfg)
    samples = _samples(cfg, base.refs())
    out = _manifest_path(cfg, mode).parent
    manifest = generate_dataset(ckpt, base, samples, out, cfg.generation_config())
    _, rows = read_manifest(manifest)
    return [manifest] + [out / r[k] for r in rows for k in ("image", "mask")]


def cmd_evaluate_generation(cfg: RunConfig, args) -> list[Path]:
    from .downstream import load_manifest_items
    from .metrics import MetricReport, RandomProjectionClassifier, cluster_lpips, inception_score
    from .core import ImagePlane, RangeTag, Role

    mode = cfg["mode"]
    manifest = _require(_manifest_path(cfg, mode), "generate")
    items = load_manifest_items(manifest)
    role = Role.COLOR if mode == "rgb" else Role.DEPTH
    planes = [ImagePlane(it.image, RangeTag.UNIT, role) for it in items]
    m = cfg["metrics"]
    probs = RandomProjectionClassifier(m["is_classes"], seed=cfg["seed"])(planes)
    is_mean, is_std = inception_score(probs, min(m["is_splits"], len(planes)))
    rng = derive_rng(cfg["seed"], "lpips-references")
    # anchors at the 1:10 ratio of 100 references per 1,000 images, capped by the config
    n_refs = min(m["references"], max(1, len(planes) // 10))
    refs_idx = np.sort(rng.choice(len(planes), size=n_refs, replace=False))
    lp = cluster_lpips(planes, [planes[i] for i in refs_idx])
    report = MetricReport(is_mean=is_mean, is_std=is_std, cluster_lpips=lp,
                          counts={"generated": len(planes), "references": int(len(refs_idx))},
                          config={"metrics": m, "mode": mode}).validate()
    path = cfg.out / "evaluate-generation" / mode / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, report.to_json())
    return [path]


def cmd_evaluate_downstream(cfg: RunConfig, args) -> list[Path]:
    from .downstream import DownstreamConfig, items_from_samples, load_manifest_items, train_classifier, \
        train_segmenter

    manifest = _require(_manifest_path(cfg, "rgb"), "generate --mode rgb")
    base, held = _load_split(cfg)
    decoders = _decoders(cfg["generation"]["decoders"])
    train_items = load_manifest_items(manifest, decoders)
    normal_refs = [r for c in base.categories for r in c.train if r.is_normal]
    normals = items_from_samples(_samples(cfg, normal_refs).values())
    held_samples = _samples(cfg, held.refs())
    eval_items = items_from_samples([held_samples[r.id] for r in held.refs() if r.id in held_samples])
    d = cfg["downstream"]
    dcfg = DownstreamConfig(d["steps"], d["batch_size"], float(d["lr"]), cfg["seed"],
                            None, float(d["normal_ratio"]))
    out = cfg.out / "evaluate-downstream"
    seg = train_segmenter(train_items, eval_items, dcfg, normals)
    seg.dump.save(out / "scores.npz")
    report = seg.report
    report.counts["train_generated"] = len(train_items)
    defects = [it for it in eval_items if not it.is_normal]
    labels = {it.label for it in train_items}
    if d["classifier"] and len(labels) >= 2 and defects and {it.label for it in defects} <= labels:
        clf = train_classifier(train_items, defects, dcfg)
        report.config["classifier_accuracy"] = clf.accuracy
    atomic_write_text(out / "report.json", report.validate().to_json())
    return [out / "report.json", out / "scores.npz", out / "scores.json"]


def cmd_report(cfg: RunConfig, args) -> list[Path]:
    reports = {}
    for path in sorted(cfg.out.glob("evaluate-*/**/report.json")):
        reports[str(path.parent.relative_to(cfg.out))] = json.loads(path.read_text())
    if not reports:
        raise MissingPrerequisite(cfg.out / "evaluate-*", "evaluate-generation or evaluate-downstream")
    path = cfg.out / "report.json"
    atomic_write_text(path, json.dumps(reports, indent=2, sort_keys=True))
    for name, rep in reports.items():
        flat = {k: v for k, v in rep.items() if isinstance(v, (int, float)) and k != "schema"}
        for group in ("image", "pixel"):
            flat.update({f"{group}_{k}": v for k, v in (rep.get(group) or {}).items()})
        print(name + ": " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(flat.items())))
    return [path]


COMMANDS = {
    "make-toy": cmd_make_toy,
    "prepare-conditions": cmd_prepare,
    "train": cmd_train,
    "finetune-depth": cmd_finetune,
    "generate": cmd_generate,
    "evaluate-generation": cmd_evaluate_generation,
    "evaluate-downstream": cmd_evaluate_downstream,
    "report": cmd_report,
}


def _parse_value(text: str):
    return yaml.safe_load(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridsynth", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--decoders", choices=["ahd", "ahe", "both"])
        p.add_argument("--manipulations", help="comma-separated subset of merge,remove,replace,tps")
        p.add_argument("--mode", choices=["rgb", "depth"])
        p.add_argument("--out", type=Path, help="output root")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. training.steps=50")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "make-toy":
            p.add_argument("--size", type=int, default=64)
    return parser


def resolve_config(args) -> RunConfig:
    raw = {}
    if args.config is not None:
        raw = RunConfig.load(args.config).to_dict()
    cfg = RunConfig(_merge(DEFAULTS, raw))
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.decoders:
        cfg.set("generation.decoders", args.decoders)
        cfg.set("training.decoders", args.decoders)
    if args.manipulations:
        cfg.set("generation.manipulations", [k.strip() for k in args.manipulations.split(",") if k.strip()])
    if args.mode:
        cfg.set("mode", args.mode)
    if args.out:
        cfg.set("output", str(args.out))
    for item in args.set:
        if "=" not in item:
            raise ConfigValidationError([f"--set {item!r}: expected KEY=VALUE"])
        key, value = item.split("=", 1)
        cfg.set(key, _parse_value(value))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigValidationError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    inputs = {"config": file_hash(args.config) if args.config else None}
    t0 = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](cfg, args)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (HybridSynthError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    cfg.out.mkdir(parents=True, exist_ok=True)
    if args.command != "make-toy":
        prep = cfg.out / "prepare" / "index.json"
        if prep.exists():
            inputs["index"] = file_hash(prep)
        record_command(cfg, args.command, inputs, outputs, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
