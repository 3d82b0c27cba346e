"""Run configuration: ``key = value`` files, flag overrides, schema validation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .heads import HEAD_KINDS
from .models import FewShotConfig, SupervisedConfig
from .sparse import EncoderConfig


class ConfigError(ValueError):
    """Bad key, bad value or missing required key; maps to a usage error."""


def _int(lo=None, hi=None):
    def parse(text):
        v = int(text)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"{v} outside [{lo}, {hi if hi is not None else 'inf'}]")
        return v
    return parse


def _float(lo=None, hi=None, open_lo=False, open_hi=False):
    def parse(text):
        v = float(text)
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("must be finite")
        if lo is not None and (v < lo or (open_lo and v == lo)):
            raise ValueError(f"{v} below {'or at ' if open_lo else ''}{lo}")
        if hi is not None and (v > hi or (open_hi and v == hi)):
            raise ValueError(f"{v} above {'or at ' if open_hi else ''}{hi}")
        return v
    return parse


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _dashed(text) -> tuple:
    """'64-16-1' -> (64, 16, 1); empty string -> ()."""
    if isinstance(text, tuple):
        return text
    text = str(text).strip()
    if not text:
        return ()
    vals = tuple(int(x) for x in text.split("-"))
    if any(v < 1 for v in vals):
        raise ValueError("entries must be positive")
    return vals


def _views(text):
    vals = _dashed(text)
    if not vals or vals[-1] != 1:
        raise ValueError("views must be non-empty and end with 1")
    return vals


def _regions(text):
    v = int(text)
    if v not in (1, 2, 4, 8):
        raise ValueError("must be 1, 2, 4 or 8")
    return v


def _path(text):
    return str(text)


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "seed": Key(_int(0), 0, "all randomness derives from this"),
    "scenes": Key(_int(1), 400, "number of synthetic scenes"),
    "data": Key(_path, None, "dataset directory"),
    "out": Key(_path, None, "output directory"),
    "checkpoint": Key(_path, None, "checkpoint file to evaluate"),
    "fold": Key(_int(0, 2), 0, "fold index 0..2"),
    "shots": Key(_int(1), 1, "support items per episode"),
    "episodes": Key(_int(1), 2000, "training episodes"),
    "eval_episodes": Key(_int(1), 1000, "evaluation episodes"),
    "epochs": Key(_int(1), 10, "supervised training epochs"),
    "holdout": Key(_float(0.0, 1.0, open_lo=True, open_hi=True), 0.2, "scene fraction held out for supervised eval"),
    "lr": Key(_float(0.0), 0.05, "SGD learning rate"),
    "momentum": Key(_float(0.0, 1.0, open_hi=True), 0.9, "SGD momentum"),
    "log_every": Key(_int(1), 50, "episodes per loss-curve row"),
    "prototype": Key(_choice("compositional", "global"), "compositional", "prototype construction"),
    "attention": Key(_choice(*HEAD_KINDS), "mvc", "region attention head kind"),
    "attention_views": Key(_views, (64, 16, 1), "attention head views"),
    "head": Key(_choice(*HEAD_KINDS), "mvc", "comparison head kind"),
    "head_views": Key(_views, (64, 16, 1), "comparison head views"),
    "post_layers": Key(_int(0), 5, "post-processing conv layers (0 disables)"),
    "post_width": Key(_int(1), 16, "post-processing hidden width"),
    "max_regions": Key(_regions, 8, "octant regions per support"),
    "encoder_widths": Key(_dashed, (32, 64, 96, 128), "encoder conv widths"),
    "residual_blocks": Key(_int(0), 2, "residual blocks per width"),
    "voxel_size": Key(_float(0.0, open_lo=True), 0.05, "voxel edge in meters"),
    "flops_q": Key(_int(1), 10000, "query points for MAC counting"),
    "flops_s": Key(_int(1), 1, "support items for MAC counting"),
    "flops_d": Key(_int(1), 128, "feature dimension for MAC counting"),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return "-".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if raw is None:
            return
        try:
            self.values[key] = SCHEMA[key].parse(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None

    def __getitem__(self, key: str):
        return self.values[key]

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self.values[k] is None]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}")

    def dumps(self, keys=None) -> str:
        keys = list(SCHEMA) if keys is None else keys
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in keys if self.values[k] is not None)

    def encoder(self) -> EncoderConfig:
        widths = self["encoder_widths"]
        if not widths:
            raise ConfigError("encoder_widths must be non-empty")
        return EncoderConfig(widths, self["residual_blocks"], self["voxel_size"])

    def fewshot(self) -> FewShotConfig:
        return FewShotConfig(self.encoder(), self["prototype"], self["attention"], self["attention_views"],
                             self["head"], self["head_views"], self["post_layers"], self["post_width"],
                             self["max_regions"])

    def supervised(self, n_classes: int) -> SupervisedConfig:
        return SupervisedConfig(self.encoder(), n_classes, self["head_views"])


def parse_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def load(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for k, v in parse_text(Path(path).read_text()).items():
            cfg.set(k, v)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg
