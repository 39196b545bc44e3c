"""Command-line interface: ``microcnn {train,evaluate,predict,summary}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
abort (non-finite loss), 4 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (DataError, IMAGE_SIZE, PARTITIONS, load_directory, normalize,
                   read_png, resize_bilinear, split)
from .model import build_malaria_net, format_summary
from .tensor import Rng
from .training import NumericalError, TrainConfig, evaluate, train

log = logging.getLogger("microcnn")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 1, 2, 3, 4


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    epochs: int = 50
    batch_size: int = 64
    target_val_accuracy: float = 0.95
    learning_rate: float = 0.001
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    dropout_rate: float = 0.2
    data_root: str = ""
    checkpoint: str = ""
    output_dir: str = "."

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "checkpoint.mcn1"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if key == "split_ratios":
            parts = tuple(float(p) for p in raw.split(","))
            if len(parts) != 3:
                raise ValueError("expected three comma-separated numbers")
            return parts
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.data_root:
        raise ConfigError("data_root is not set")
    return cfg


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def write_history(path: Path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"])
        for m in history:
            w.writerow([m.epoch, _fmt(m.train_loss), _fmt(m.train_accuracy),
                        _fmt(m.val_loss), _fmt(m.val_accuracy), _fmt(m.wall_time_seconds)])


def write_cost_log(path: Path, cost_log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "epoch", "loss"])
        for batch, epoch, loss in cost_log.records:
            w.writerow([batch, epoch, _fmt(loss)])


def _load_split(data_root, seed, ratios):
    images, class_names = load_directory(data_root, size=IMAGE_SIZE)
    log.info("loaded %d images; classes %s", len(images),
             ", ".join(f"{i}={n}" for i, n in enumerate(class_names)))
    return split(images, ratios, seed, class_names)


def cmd_train(cfg: RunConfig) -> int:
    tcfg = cfg.train_config()
    parts = _load_split(cfg.data_root, tcfg.seed, tcfg.split_ratios)
    log.info("split sizes: train=%d val=%d test=%d", len(parts.train), len(parts.val),
             len(parts.test))
    model = build_malaria_net(Rng(tcfg.seed), tcfg.dropout_rate, tcfg.learning_rate)
    model.meta = {"class_names": parts.class_names, "seed": tcfg.seed,
                  "split_ratios": list(tcfg.split_ratios), "batch_size": tcfg.batch_size}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    history, cost_log, stopped = train(model, parts, tcfg)
    checkpoint.save(model, cfg.checkpoint_path)
    write_history(out / "history.csv", history)
    write_cost_log(out / "cost_log.csv", cost_log)
    reason = "validation target reached" if stopped else "epoch limit reached"
    print(f"trained {len(history)} epoch(s), {reason}; checkpoint {cfg.checkpoint_path}")
    loss, acc = evaluate(model, parts.test, tcfg)
    print(f"test loss={_fmt(loss)} accuracy={_fmt(acc)}")
    return 0


def cmd_evaluate(args) -> int:
    model = checkpoint.load(args.checkpoint)
    meta = model.meta
    seed = args.seed if args.seed is not None else meta.get("seed", 0)
    ratios = args.split_ratios or tuple(meta.get("split_ratios", (0.8, 0.1, 0.1)))
    batch_size = args.batch_size or meta.get("batch_size", 64)
    parts = _load_split(args.data_root, seed, ratios)
    if meta.get("class_names") and meta["class_names"] != parts.class_names:
        log.warning("class folders %s differ from checkpoint classes %s",
                    parts.class_names, meta["class_names"])
    if args.partition == "all":
        images = parts.train + parts.val + parts.test
    else:
        images = getattr(parts, args.partition)
    loss, acc = evaluate(model, images, TrainConfig(batch_size=batch_size))
    print(f"loss={_fmt(loss)} accuracy={_fmt(acc)}")
    return 0


def cmd_predict(args) -> int:
    model = checkpoint.load(args.checkpoint)
    h, w, _ = model.input_shape
    pixels = resize_bilinear(read_png(args.image), h, w)
    probs = model.forward(normalize(pixels)[None])[0]
    k = int(np.argmax(probs))
    names = model.meta.get("class_names") or [str(i) for i in range(len(probs))]
    print(f"{names[k]} {_fmt(float(probs[k]))}")
    return 0


def cmd_summary(args) -> int:
    print(format_summary(build_malaria_net(Rng(0))))
    return 0


def _ratios(text: str):
    try:
        return _parse_value("split_ratios", text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microcnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the reference network")
    t.add_argument("config", nargs="?", help="key=value config file")
    for name, f in _FIELDS.items():
        conv = _ratios if name == "split_ratios" else {"int": int, "float": float}.get(f.type, str)
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=conv, default=None,
                       help=f"override {name}")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a data split")
    e.add_argument("checkpoint")
    e.add_argument("data_root")
    e.add_argument("--partition", choices=[*PARTITIONS, "all"], default="test")
    e.add_argument("--seed", type=int, default=None, help="split seed (default: from checkpoint)")
    e.add_argument("--split-ratios", type=_ratios, default=None)
    e.add_argument("--batch-size", type=int, default=None)

    pr = sub.add_parser("predict", help="classify one PNG image")
    pr.add_argument("checkpoint")
    pr.add_argument("image")

    sub.add_parser("summary", help="print the reference network summary")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "train":
            overrides = {k: getattr(args, k) for k in _FIELDS}
            return cmd_train(load_run_config(args.config, overrides))
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "predict":
            return cmd_predict(args)
        return cmd_summary(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (checkpoint.CheckpointError, OSError) as exc:
        print(f"checkpoint error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
