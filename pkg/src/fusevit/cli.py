"""One command-line entry point for the whole pipeline.

Subcommands: gen, train, eval, compare, inspect, gradcheck. Configuration
precedence is defaults < JSON config file < command-line flags; every config
field has a flag of the same name. Exit codes: 0 success, 1 usage or config
error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ftz
from .data import AugmentConfig, SynthSpec, generate_synth, load_dataset, save_dataset
from .encoder import ModelConfig
from .errors import (
    ConfigError,
    FtzError,
    FuseVitError,
    NumericError,
    OracleError,
    ShapeError,
    TapeError,
    TraceMismatchError,
)
from .gradcheck import format_report, run_suite
from .model import FuseVitModel, load_checkpoint, save_checkpoint
from .selector import write_selection_trace
from .tensor import Tensor, cross_entropy
from .train import TrainConfig, evaluate, train

COMPARE_VARIANTS = ("none", "saws", "maws")
COMPARE_HEADER = "variant,test_acc,train_acc,steps"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Flat union of model, training, and dataset settings plus paths."""

    # model
    image_size: int = 32
    channels: int = 1
    patch: int = 8
    dim: int = 32
    layers: int = 4
    heads: int = 4
    mlp_dim: int | None = None  # defaults to 4*dim
    k: int = 4
    selector: str = "maws"
    head_layers: int = 1
    # training
    lr: float = 5e-4
    momentum: float = 0.9
    steps: int = 500
    batch: int = 8
    seed: int = 0
    flip: bool = True
    crop: int | None = None       # defaults to image_size
    resize_to: int | None = None  # defaults to image_size
    # synthetic dataset
    classes: int = 5
    train_per_class: int = 8
    test_per_class: int = 4
    signal_patches: int = 6
    amplitude: float = 1.0
    noise_std: float = 0.0
    # paths / switches
    dataset: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    image: str | None = None
    trace: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_sources(cls, file_path: str | None, overrides: dict) -> "RunConfig":
        """defaults < config file < explicit flags."""
        merged = {f.name: f.default for f in fields(cls)}
        if file_path:
            path = Path(file_path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                loaded = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
            unknown = sorted(set(loaded) - set(merged))
            if unknown:
                raise ConfigError(f"unknown config keys {unknown}")
            merged.update(loaded)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)

    # ---- derived configs ----

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            image_h=self.image_size, image_w=self.image_size,
            channels=self.channels, patch_size=self.patch, embed_dim=self.dim,
            layers=self.layers, heads=self.heads,
            mlp_dim=self.mlp_dim if self.mlp_dim else 4 * self.dim,
            k=self.k, selector=self.selector, num_classes=num_classes,
            seed=self.seed, head_layers=self.head_layers)

    def train_config(self) -> TrainConfig:
        aug = AugmentConfig(flip=self.flip,
                            crop_size=self.crop or self.image_size,
                            resize_to=self.resize_to or self.image_size)
        return TrainConfig(lr0=self.lr, momentum=self.momentum,
                           total_steps=self.steps, batch_size=self.batch,
                           seed=self.seed, augment=aug)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(num_classes=self.classes,
                         train_per_class=self.train_per_class,
                         test_per_class=self.test_per_class,
                         image_size=self.image_size,
                         signal_patch_count=self.signal_patches,
                         signal_amplitude=self.amplitude,
                         noise_std=self.noise_std, seed=self.seed)


# ---- argument parsing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--selector", choices=("none", "saws", "maws"))
    p.add_argument("--k", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--mlp-dim", dest="mlp_dim", type=int)
    p.add_argument("--head-layers", dest="head_layers", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--crop", type=int)
    p.add_argument("--resize-to", dest="resize_to", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.add_argument("--signal-patches", dest="signal_patches", type=int)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--dataset", metavar="DIR")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--checkpoint", metavar="DIR")
    p.add_argument("--image", metavar="FILE")
    p.add_argument("--trace", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="fusevit",
                     description="Selective-fusion vision transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("gen", "generate a synthetic dataset"),
        ("train", "train one selector variant"),
        ("eval", "evaluate a checkpoint on a dataset"),
        ("compare", "train none/saws/maws arms and tabulate accuracy"),
        ("inspect", "dump selections and attention for one image"),
        ("gradcheck", "finite-difference verification suite"),
    ):
        p = sub.add_parser(name, help=desc)
        _add_common_flags(p)
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config")}
    return RunConfig.from_sources(args.config, overrides)


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        flags = ", ".join(f"--{n.replace('_', '-')}" for n in missing)
        raise ConfigError(f"missing required option(s): {flags}")


# ---- commands ------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> int:
    _require(cfg, "out")
    dataset = generate_synth(cfg.synth_spec())
    save_dataset(dataset, cfg.out)
    total = len(dataset.train) + len(dataset.test)
    print(f"wrote {total} images ({len(dataset.train)} train / "
          f"{len(dataset.test)} test, {dataset.num_classes} classes) to {cfg.out}")
    return 0


def _load_dataset_checked(cfg: RunConfig):
    _require(cfg, "dataset")
    path = Path(cfg.dataset)
    if not (path / "manifest.json").exists():
        raise ConfigError(f"dataset not found: no manifest.json under {path}")
    return load_dataset(path)


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "out")
    dataset = _load_dataset_checked(cfg)
    model_cfg = cfg.model_config(dataset.num_classes)
    model = FuseVitModel.build(model_cfg)
    tcfg = cfg.train_config()
    log = train(model, dataset, tcfg)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "train_log.csv")
    save_checkpoint(model, out / "checkpoint")
    report = evaluate(model, dataset.test, dataset.num_classes, tcfg.augment)
    print(f"selector={model_cfg.selector} steps={tcfg.total_steps} "
          f"final_train_loss={log.rows[-1].loss:.4f}")
    print(f"test_accuracy={report.accuracy:.4f} test_mean_loss={report.mean_loss:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint")
    dataset = _load_dataset_checked(cfg)
    model = load_checkpoint(cfg.checkpoint)
    if model.cfg.num_classes != dataset.num_classes:
        raise ConfigError(
            f"checkpoint has {model.cfg.num_classes} classes, "
            f"dataset has {dataset.num_classes}")
    aug = AugmentConfig(flip=False,
                        crop_size=cfg.crop or model.cfg.image_h,
                        resize_to=cfg.resize_to or model.cfg.image_h)
    report = evaluate(model, dataset.test, dataset.num_classes, aug)
    print(f"test_accuracy={report.accuracy:.4f} test_mean_loss={report.mean_loss:.4f}")
    for c, (acc, n) in enumerate(zip(report.per_class, report.class_counts)):
        print(f"class {c}: acc={acc:.4f} (n={n})")
    return 0


def _plain_mean_loss(model: FuseVitModel, images, labels) -> float:
    total = 0.0
    for img, label in zip(images, labels):
        logits = model.plain_forward(Tensor(img, dtype=model.dtype))
        total += float(cross_entropy(logits, int(label)).data)
    return total / len(labels)


@dataclass
class ComparisonRow:
    variant: str
    test_acc: float
    train_acc: float
    steps: int


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    init_losses: list[float]  # one per arm; equal whenever seeds are shared

    @property
    def init_loss(self) -> float:
        return self.init_losses[0]

    def csv_text(self) -> str:
        lines = [COMPARE_HEADER]
        lines += [f"{r.variant},{r.test_acc!r},{r.train_acc!r},{r.steps}"
                  for r in self.rows]
        return "\n".join(lines) + "\n"


def run_comparison(cfg: RunConfig, dataset) -> ComparisonReport:
    """Train the three arms from identical seeds and collect accuracies.

    The initial loss is measured with the plain (selector-free) forward pass
    of the freshly initialized backbone, so identical init seeds yield
    identical values for every arm by construction.
    """
    init_losses = []
    rows = []
    for variant in COMPARE_VARIANTS:
        model_cfg = cfg.model_config(dataset.num_classes)
        model_cfg.selector = variant
        model = FuseVitModel.build(model_cfg)
        init_losses.append(
            _plain_mean_loss(model, dataset.test.images, dataset.test.labels))
        tcfg = cfg.train_config()
        train(model, dataset, tcfg)
        test_report = evaluate(model, dataset.test, dataset.num_classes, tcfg.augment)
        train_report = evaluate(model, dataset.train, dataset.num_classes, tcfg.augment)
        rows.append(ComparisonRow(variant=variant,
                                  test_acc=test_report.accuracy,
                                  train_acc=train_report.accuracy,
                                  steps=tcfg.total_steps))
    return ComparisonReport(rows=rows, init_losses=init_losses)


def cmd_compare(cfg: RunConfig) -> int:
    _require(cfg, "out")
    dataset = _load_dataset_checked(cfg)
    report = run_comparison(cfg, dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(report.csv_text())
    print(f"shared initial loss (untrained backbone): {report.init_loss:.6f}")
    print(COMPARE_HEADER)
    for r in report.rows:
        print(f"{r.variant},{r.test_acc:.4f},{r.train_acc:.4f},{r.steps}")
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "image", "out")
    model = load_checkpoint(cfg.checkpoint)
    try:
        img = ftz.read(cfg.image)
    except FileNotFoundError as exc:
        raise ConfigError(f"image not readable: {exc}") from exc
    expected = (model.cfg.image_h, model.cfg.image_w, model.cfg.channels)
    if img.shape != expected:
        raise ConfigError(
            f"image shape {img.shape} does not match checkpoint input {expected}")

    result = model.forward(Tensor(img.astype(model.dtype), dtype=model.dtype))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_selection_trace(out / "selections.jsonl", result.selections,
                          model.cfg.selector)
    for record in result.trace.attention:
        ftz.write(out / f"attention.layer{record.layer_index}.ftz",
                  record.scores.data)
    ftz.write(out / "logits.ftz", result.logits.data)
    if cfg.trace:
        ftz.write(out / "fused.ftz", result.fused.tokens.data)
    predicted = int(np.argmax(result.logits.data))
    print(f"predicted_class={predicted}")
    print("logits=" + json.dumps([float(x) for x in result.logits.data]))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_suite(seed=cfg.seed)
    print(format_report(results))
    return sum(not r.passed for r in results)


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}

_CONFIG_EXIT = (UsageError, ConfigError, ShapeError, TraceMismatchError, FtzError)
_RUNTIME_EXIT = (NumericError, TapeError, OracleError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config_from_args(args)
        return _COMMANDS[args.command](cfg)
    except _CONFIG_EXIT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_EXIT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FuseVitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
