"""JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .arch import ArchConfig
from .data import GENERATORS, VGG_MEAN, VGG_STD
from .train import TrainConfig

REQUIRED = (
    "seed", "variant", "gate_mode", "depth", "stage_channels", "num_classes",
    "gate_channels", "crop", "base_lr", "momentum", "weight_decay", "power",
    "max_iter", "stage_weights", "class_balancing", "dataset", "output_dir",
)
OPTIONAL = {
    "batch_size": 1,
    "checkpoint_every": 0,
    "seeds": None,
    "eval_dataset": None,
    "skip_offset": 0,
    "mean": list(VGG_MEAN),
    "std": list(VGG_STD),
    "lr_mult": {},
    "decay_all": False,
    "bn_eps": 1e-5,
    "bn_momentum": 0.1,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def arch(self, **overrides) -> ArchConfig:
        r = {**self.raw, **overrides}
        return ArchConfig(depth=r["depth"], stage_channels=tuple(r["stage_channels"]),
                          num_classes=r["num_classes"], gate_channels=r["gate_channels"],
                          variant=r["variant"], gate_mode=r["gate_mode"],
                          skip_offset=r["skip_offset"], bn_eps=r["bn_eps"], bn_momentum=r["bn_momentum"])

    def train_config(self, **overrides) -> TrainConfig:
        r = {**self.raw, **overrides}
        return TrainConfig(max_iter=r["max_iter"], base_lr=r["base_lr"], momentum=r["momentum"],
                           weight_decay=r["weight_decay"], power=r["power"],
                           stage_weights=r["stage_weights"], class_balancing=r["class_balancing"],
                           crop=tuple(r["crop"]) if r["crop"] is not None else None,
                           batch_size=r["batch_size"], mean=tuple(r["mean"]), std=tuple(r["std"]),
                           lr_mult=dict(r["lr_mult"]), decay_all=r["decay_all"])

    def with_overrides(self, **kw) -> "RunConfig":
        return parse({**self.raw, **kw})


def _check_dataset(ds, key, depth, num_classes):
    if not isinstance(ds, dict):
        raise ConfigError(f"{key} must be an object with 'generator' or 'manifest'")
    if "manifest" in ds:
        if set(ds) != {"manifest"}:
            raise ConfigError(f"{key}: a manifest dataset takes no other keys")
        return
    gen = ds.get("generator")
    if gen not in GENERATORS:
        raise ConfigError(f"{key}.generator must be one of {sorted(GENERATORS)}, got {gen!r}")
    allowed = {"generator", "n", "size"}
    if set(ds) - allowed:
        raise ConfigError(f"{key}: unknown keys {sorted(set(ds) - allowed)}")
    for k in ("n", "size"):
        if not isinstance(ds.get(k), int) or ds[k] < 0:
            raise ConfigError(f"{key}.{k} must be a non-negative integer")
    q = 2 ** depth
    if ds["size"] % q or ds["size"] == 0:
        raise ConfigError(f"{key}.size = {ds['size']} is not divisible by 2**depth = {q}; "
                          f"use a multiple of {q} (e.g. {max(q, ds['size'] // q * q)})")
    if gen == "ambiguous" and num_classes != 3:
        raise ConfigError("the ambiguous generator produces 3 classes; set num_classes to 3")


def parse(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(REQUIRED) - set(OPTIONAL)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing config keys: {missing}")
    full = {**{k: (v.copy() if isinstance(v, (list, dict)) else v) for k, v in OPTIONAL.items()}, **raw}
    try:
        cfg = RunConfig(full)
        arch = cfg.arch()
        tc = cfg.train_config()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if not isinstance(full["seed"], int) or full["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(full["max_iter"], int) or full["max_iter"] < 0:
        raise ConfigError("max_iter must be a non-negative integer")
    if full["base_lr"] <= 0 or not 0 <= full["momentum"] < 1 or full["weight_decay"] < 0 or full["power"] <= 0:
        raise ConfigError("need base_lr > 0, 0 <= momentum < 1, weight_decay >= 0, power > 0")
    if full["batch_size"] < 1:
        raise ConfigError("batch_size must be >= 1")
    if tc.stage_weights is not None:
        if len(tc.stage_weights) != arch.num_stages or any(w < 0 for w in tc.stage_weights):
            raise ConfigError(f"stage_weights needs {arch.num_stages} non-negative values")
    if tc.crop is not None:
        if len(tc.crop) != 2 or any(c % 2 ** arch.depth or c <= 0 for c in tc.crop):
            raise ConfigError(f"crop must be two positive multiples of {2 ** arch.depth}")
    if any(s <= 0 for s in full["std"]) or len(full["std"]) != 3 or len(full["mean"]) != 3:
        raise ConfigError("mean and std need 3 values each, std > 0")
    if full["seeds"] is not None and (not isinstance(full["seeds"], list) or not full["seeds"]):
        raise ConfigError("seeds must be a non-empty list of integers")
    _check_dataset(full["dataset"], "dataset", arch.depth, arch.num_classes)
    if full["eval_dataset"] is not None:
        _check_dataset(full["eval_dataset"], "eval_dataset", arch.depth, arch.num_classes)
    return cfg


def load(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse(raw)
