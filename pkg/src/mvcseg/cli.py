"""mvcseg command line: data generation, training, evaluation, complexity, self-checks.

Exit codes: 0 success, 1 selftest failure, 2 usage error, 3 missing input,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import selftest
from .autodiff import load_checkpoint, save_checkpoint
from .config import SCHEMA, ConfigError, RunConfig
from .data import (
    InsufficientExamplesError,
    ManifestEntry,
    build_pool,
    crop_instance,
    default_catalog,
    make_folds,
    read_cloud,
    synth_dataset,
    write_cloud,
    write_manifest,
)
from .engine import (
    DivergenceError,
    eval_fewshot,
    eval_supervised,
    point_counts,
    predict,
    train_fewshot,
    train_supervised,
)
from .heads import REFERENCE_ROWS, count_macs_params
from .models import FewShotNet, SupervisedNet

log = logging.getLogger("mvcseg")

EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4

MODEL_KEYS = ["prototype", "attention", "attention_views", "head", "head_views", "post_layers", "post_width",
              "max_regions", "encoder_widths", "residual_blocks", "voxel_size"]
COMMAND_KEYS = {
    "synth": ["scenes", "seed", "out"],
    "train-fewshot": ["data", "out", "seed", "fold", "shots", "episodes", "lr", "momentum", "log_every"] + MODEL_KEYS,
    "eval-fewshot": ["data", "checkpoint", "out", "seed", "fold", "shots", "eval_episodes"] + MODEL_KEYS,
    "train-supervised": ["data", "out", "seed", "epochs", "lr", "momentum", "holdout", "head_views",
                         "encoder_widths", "residual_blocks", "voxel_size"],
    "eval-supervised": ["data", "checkpoint", "out", "holdout", "head_views", "encoder_widths",
                        "residual_blocks", "voxel_size"],
    "flops": ["out", "flops_q", "flops_s", "flops_d"],
    "selftest": [],
}


class MissingInput(Exception):
    pass


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def load_scenes(data: str) -> list:
    root = _require_file(data, "dataset directory")
    files = sorted((root / "scenes").glob("*.pcseg"))
    if not files:
        raise MissingInput(f"no scenes under {root / 'scenes'}")
    return [(f.name, read_cloud(f)) for f in files]


def _universe():
    return [c.name for c in default_catalog().classes]


def _echo(cfg: RunConfig, command: str) -> None:
    atomic_write(Path(cfg["out"]) / "config.txt", f"# {command}\n" + cfg.dumps(COMMAND_KEYS[command]))


def cmd_synth(cfg: RunConfig) -> int:
    cfg.require("out")
    out = Path(cfg["out"])
    rows = ["scene,instance,class,points,crop_points"]
    for name, cloud in synth_dataset(cfg["scenes"], cfg["seed"]):
        tmp = out / "scenes" / f".{name}.tmp"
        tmp.parent.mkdir(parents=True, exist_ok=True)
        write_cloud(tmp, cloud)
        os.replace(tmp, out / "scenes" / name)
        for inst in cloud.instance_ids():
            inst = int(inst)
            crop = crop_instance(cloud, inst)
            rows.append(f"{name},{inst},{cloud.instance_class(inst)},"
                        f"{int(np.count_nonzero(cloud.instance == inst))},{len(crop)}")
    atomic_write(out / "instances.csv", "\n".join(rows) + "\n")
    _echo(cfg, "synth")
    print(f"wrote {cfg['scenes']} scenes, {len(rows) - 1} instances to {out}")
    return EXIT_OK


def _fewshot_setup(cfg: RunConfig):
    scenes = load_scenes(cfg["data"])
    fold = make_folds(_universe(), cfg["fold"])
    return scenes, fold, FewShotNet(cfg.fewshot(), cfg["seed"])


def cmd_train_fewshot(cfg: RunConfig) -> int:
    cfg.require("data", "out")
    scenes, fold, model = _fewshot_setup(cfg)
    pool = build_pool(scenes, fold.train_labels)
    rows = ["episode,loss"]

    def on_log(episode, loss):
        rows.append(f"{episode},{loss!r}")
        print(f"episode {episode} loss {loss:.4f}", flush=True)

    train_fewshot(model, pool, fold.train_labels, cfg["episodes"], cfg["lr"], cfg["momentum"], cfg["seed"],
                  cfg["shots"], cfg["log_every"], on_log)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".model.ckpt.")
    os.close(fd)
    save_checkpoint(tmp, model.params)
    os.replace(tmp, out / "model.ckpt")
    atomic_write(out / "loss.csv", "\n".join(rows) + "\n")
    _echo(cfg, "train-fewshot")
    return EXIT_OK


def _load_into(params, path) -> None:
    state = load_checkpoint(_require_file(path, "checkpoint"))
    try:
        params.load_state(state)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"checkpoint {path} does not fit the configured model: {e}") from None


def cmd_eval_fewshot(cfg: RunConfig) -> int:
    cfg.require("data", "checkpoint", "out")
    scenes, fold, model = _fewshot_setup(cfg)
    _load_into(model.params, cfg["checkpoint"])
    pool = build_pool(scenes, fold.test_labels)
    episodes: list = []

    def record(ep):
        episodes.append(ManifestEntry(ep.cls, ep.k, tuple(ep.support_refs), ep.query_ref))
        return predict(model, ep)[0]

    report = eval_fewshot(model, pool, fold.test_labels, cfg["shots"], cfg["eval_episodes"], cfg["seed"],
                          cfg["fold"], predictor=record)
    out = Path(cfg["out"])
    atomic_write(out / "report.csv", report.to_csv())
    out.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".episodes.txt.")
    os.close(fd)
    write_manifest(tmp, episodes)
    os.replace(tmp, out / "episodes.txt")
    _echo(cfg, "eval-fewshot")
    print(f"fold {cfg['fold']} {cfg['shots']}-shot meanIoU {report.fold_miou(cfg['fold']):.4f} "
          f"over {report.episodes} episodes")
    return EXIT_OK


def _supervised_split(cfg: RunConfig):
    scenes = [c for _, c in load_scenes(cfg["data"])]
    n_test = max(1, int(round(len(scenes) * cfg["holdout"])))
    if n_test >= len(scenes):
        raise ConfigError(f"holdout {cfg['holdout']} leaves no training scenes out of {len(scenes)}")
    n_classes = len(_universe()) + 1
    return scenes[:-n_test], scenes[-n_test:], n_classes


def cmd_train_supervised(cfg: RunConfig) -> int:
    cfg.require("data", "out")
    train, _, n_classes = _supervised_split(cfg)
    model = SupervisedNet(cfg.supervised(n_classes), cfg["seed"])
    rows = ["epoch,loss"]

    def on_epoch(epoch, loss, acc):
        rows.append(f"{epoch},{loss!r}")
        print(f"epoch {epoch} loss {loss:.4f} accuracy {acc:.3f}", flush=True)

    train_supervised(model, train, cfg["epochs"], cfg["lr"], cfg["momentum"], cfg["seed"], on_epoch)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".model.ckpt.")
    os.close(fd)
    save_checkpoint(tmp, model.params)
    os.replace(tmp, out / "model.ckpt")
    atomic_write(out / "loss.csv", "\n".join(rows) + "\n")
    _echo(cfg, "train-supervised")
    return EXIT_OK


def cmd_eval_supervised(cfg: RunConfig) -> int:
    cfg.require("data", "checkpoint", "out")
    train, test, n_classes = _supervised_split(cfg)
    model = SupervisedNet(cfg.supervised(n_classes), 0)
    _load_into(model.params, cfg["checkpoint"])
    report = eval_supervised(model, test, point_counts(train, n_classes))
    atomic_write(Path(cfg["out"]) / "report.csv", report.to_csv())
    _echo(cfg, "eval-supervised")
    print(" ".join(f"{k} {v:.4f}" for k, v in report.group_miou().items()))
    return EXIT_OK


def cmd_flops(cfg: RunConfig) -> int:
    rows = ["head,views,macs,params"]
    for kind, views in REFERENCE_ROWS:
        macs, params = count_macs_params(kind, views, cfg["flops_q"], cfg["flops_s"], cfg["flops_d"])
        rows.append(f"{kind},{'-'.join(map(str, views))},{macs},{params}")
    text = "\n".join(rows) + "\n"
    if cfg["out"] is not None:
        atomic_write(Path(cfg["out"]) / "flops.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, corrupt: bool = False) -> int:
    failed = selftest.run(corrupt=corrupt)
    if failed:
        print(f"selftest failed: {', '.join(failed)}")
        return EXIT_SELFTEST
    print("selftest passed")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train-fewshot": cmd_train_fewshot,
    "eval-fewshot": cmd_eval_fewshot,
    "train-supervised": cmd_train_supervised,
    "eval-supervised": cmd_eval_supervised,
    "flops": cmd_flops,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvcseg", description="Few-shot point cloud segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override its entries")
        for key in keys:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=SCHEMA[key].help)
        if name == "selftest":
            p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k: getattr(args, k) for k in COMMAND_KEYS[args.command]}
    try:
        if args.config is not None:
            _require_file(args.config, "config file")
        cfg = cfgmod.load(args.config, overrides)
        if args.command == "selftest":
            return cmd_selftest(cfg, args.corrupt_gradient)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"mvcseg {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInput, FileNotFoundError) as e:
        print(f"mvcseg {args.command}: {e}", file=sys.stderr)
        return EXIT_MISSING
    except InsufficientExamplesError as e:
        print(f"mvcseg {args.command}: dataset too small: {e}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as e:
        print(f"mvcseg {args.command}: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"mvcseg {args.command}: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
