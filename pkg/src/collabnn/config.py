"""Experiment configuration: strict JSON schema with defaults and overrides.

Unknown keys are rejected with their path; every sub-config invariant is
checked before any work (or output) happens. The resolved dictionary is
echoed into summary.json so a run is reproducible from its own output.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import SyntheticSpec
from .losses import LossConfig
from .nn import LayerSpec, conv_spec, dropout_spec, flatten_spec, linear_spec, pool_spec
from .train import NoiseConfig, TrainConfig


class ConfigError(Exception):
    """The experiment configuration is malformed or inconsistent."""


DEFAULT_CONFIG: dict = {
    "output_dir": "runs/experiment",
    "dataset": {
        "kind": "synthetic",
        "classes": 4,
        "per_class_train": 200,
        "per_class_test": 50,
        "channels": 1,
        "height": 16,
        "width": 16,
        "signal": 1.0,
        "noise_sigma": 0.3,
    },
    "arch": {
        "trunk": [
            {"kind": "conv", "channels": 8, "kernel": 3, "group": 0},
            {"kind": "pool", "window": 2},
            {"kind": "conv", "channels": 16, "kernel": 3, "group": 1},
            {"kind": "pool", "window": 2},
            {"kind": "conv", "channels": 16, "kernel": 3, "group": 2},
        ],
        "head": [
            {"kind": "dropout", "rate": 0.5},
            {"kind": "linear", "units": 64},
            {"kind": "dropout", "rate": 0.5},
            {"kind": "linear", "units": 4},
        ],
    },
    "train": {
        "epochs": 50,
        "batch_size": 32,
        "lr0": 0.1,
        "milestones": [60, 120, 160],
        "decay": 0.2,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "seed": 1,
        "precision": 32,
    },
    "loss": {
        "active": [],
        "K": 2,
        "T": 2.0,
        "alpha_out": 0.5,
        "alpha_mid": 0.05,
        "beta_mid": 0.05,
        "w_pp": 0.1,
        "lambda_kernel": 1.0,
        "kernel_groups": None,
        "mid_include_self": False,
    },
    "noise": {
        "level": 0.0,
        "reshuffle_per_epoch": True,
    },
}


@dataclass
class ExperimentConfig:
    output_dir: str
    dataset_kind: str            # "synthetic" | "clds"
    synthetic: Optional[SyntheticSpec]
    clds_train: Optional[str]
    clds_test: Optional[str]
    arch: list[LayerSpec]
    classes: Optional[int]       # known up front for synthetic only
    input_shape: Optional[tuple[int, int, int]]
    train: TrainConfig
    loss: LossConfig
    noise: NoiseConfig
    echo: dict                   # fully resolved config, for summary.json

    @property
    def n_dropout(self) -> int:
        return sum(1 for s in self.arch if s.kind == "dropout")


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
    return value


def _merge_section(defaults: dict, given: dict, path: str) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"{path}.{key}: unknown key")
        if isinstance(defaults[key], dict) and key != "arch":
            merged[key] = _merge_section(defaults[key], _require_mapping(value, f"{path}.{key}"), f"{path}.{key}")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _check_item_keys(item: dict, allowed: set[str], path: str) -> None:
    extra = set(item) - allowed
    if extra:
        raise ConfigError(f"{path}: unknown keys {sorted(extra)}")
    if "kind" not in item:
        raise ConfigError(f"{path}: missing 'kind'")


def _parse_arch(arch: dict, path: str = "arch") -> list[LayerSpec]:
    allowed_sections = {"trunk", "head"}
    extra = set(arch) - allowed_sections
    if extra:
        raise ConfigError(f"{path}: unknown keys {sorted(extra)}")
    specs: list[LayerSpec] = []
    for idx, item in enumerate(arch.get("trunk", [])):
        item = _require_mapping(item, f"{path}.trunk[{idx}]")
        kind = item.get("kind")
        if kind == "conv":
            _check_item_keys(item, {"kind", "channels", "kernel", "group"}, f"{path}.trunk[{idx}]")
            specs.append(conv_spec(int(item["channels"]), int(item.get("kernel", 3)), int(item.get("group", 0))))
        elif kind == "pool":
            _check_item_keys(item, {"kind", "window"}, f"{path}.trunk[{idx}]")
            specs.append(pool_spec(int(item.get("window", 2))))
        else:
            raise ConfigError(f"{path}.trunk[{idx}]: kind must be conv or pool, got {kind!r}")
    specs.append(flatten_spec())
    for idx, item in enumerate(arch.get("head", [])):
        item = _require_mapping(item, f"{path}.head[{idx}]")
        kind = item.get("kind")
        if kind == "linear":
            _check_item_keys(item, {"kind", "units"}, f"{path}.head[{idx}]")
            specs.append(linear_spec(int(item["units"])))
        elif kind == "dropout":
            _check_item_keys(item, {"kind", "rate"}, f"{path}.head[{idx}]")
            specs.append(dropout_spec(float(item.get("rate", 0.5))))
        else:
            raise ConfigError(f"{path}.head[{idx}]: kind must be linear or dropout, got {kind!r}")
    return specs


def _parse_dataset(section: dict):
    kind = section["kind"]
    if kind == "synthetic":
        spec = SyntheticSpec(
            m=int(section["classes"]),
            per_class_train=int(section["per_class_train"]),
            per_class_test=int(section["per_class_test"]),
            channels=int(section["channels"]),
            height=int(section["height"]),
            width=int(section["width"]),
            signal=float(section["signal"]),
            noise_sigma=float(section["noise_sigma"]),
        )
        return "synthetic", spec, None, None
    if kind == "clds":
        for key in ("train_path", "test_path"):
            if key not in section or not isinstance(section[key], str):
                raise ConfigError(f"dataset.{key}: required for clds datasets")
        return "clds", None, section["train_path"], section["test_path"]
    raise ConfigError(f"dataset.kind must be synthetic or clds, got {kind!r}")


def resolve_config(raw: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Merge with defaults, apply CLI overrides, and validate everything."""
    raw = _require_mapping(raw, "config")
    defaults = copy.deepcopy(DEFAULT_CONFIG)
    # dataset section shape depends on kind: substitute a clds skeleton first
    if raw.get("dataset", {}).get("kind") == "clds":
        defaults["dataset"] = {"kind": "clds", "train_path": "", "test_path": ""}
    merged = _merge_section(defaults, raw, "config")

    overrides = overrides or {}
    if overrides.get("seed") is not None:
        merged["train"]["seed"] = int(overrides["seed"])
    if overrides.get("epochs") is not None:
        merged["train"]["epochs"] = int(overrides["epochs"])
    if overrides.get("precision") is not None:
        merged["train"]["precision"] = int(overrides["precision"])
    if overrides.get("out") is not None:
        merged["output_dir"] = str(overrides["out"])

    kind, synthetic, clds_train, clds_test = _parse_dataset(merged["dataset"])
    arch = _parse_arch(_require_mapping(merged["arch"], "arch"))

    t = merged["train"]
    try:
        train_cfg = TrainConfig(
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            lr0=float(t["lr0"]),
            milestones=tuple(int(v) for v in t["milestones"]),
            decay=float(t["decay"]),
            momentum=float(t["momentum"]),
            weight_decay=float(t["weight_decay"]),
            seed=int(t["seed"]),
            precision=int(t["precision"]),
        )
        train_cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc

    lo = merged["loss"]
    loss_cfg = LossConfig(
        active=frozenset(lo["active"]),
        K=int(lo["K"]),
        T=float(lo["T"]),
        alpha_out=float(lo["alpha_out"]),
        alpha_mid=float(lo["alpha_mid"]),
        beta_mid=float(lo["beta_mid"]),
        w_pp=float(lo["w_pp"]),
        lambda_kernel=float(lo["lambda_kernel"]),
        kernel_groups=None if lo["kernel_groups"] is None else frozenset(int(g) for g in lo["kernel_groups"]),
        mid_include_self=bool(lo["mid_include_self"]),
    )
    noise_cfg = NoiseConfig(
        level=float(merged["noise"]["level"]),
        reshuffle_per_epoch=bool(merged["noise"]["reshuffle_per_epoch"]),
    )
    noise_cfg.validate()

    cfg = ExperimentConfig(
        output_dir=str(merged["output_dir"]),
        dataset_kind=kind,
        synthetic=synthetic,
        clds_train=clds_train,
        clds_test=clds_test,
        arch=arch,
        classes=synthetic.m if synthetic else None,
        input_shape=(synthetic.channels, synthetic.height, synthetic.width) if synthetic else None,
        train=train_cfg,
        loss=loss_cfg,
        noise=noise_cfg,
        echo=merged,
    )
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: ExperimentConfig) -> None:
    if cfg.synthetic is not None:
        cfg.synthetic.validate()
        linears = [s for s in cfg.arch if s.kind == "linear"]
        if not linears:
            raise ConfigError("arch.head: needs at least one linear layer")
        if linears[-1].units != cfg.synthetic.m:
            raise ConfigError(
                f"arch.head: final linear has {linears[-1].units} units, "
                f"dataset has {cfg.synthetic.m} classes"
            )
    unknown = cfg.loss.active - {"out", "mid", "pull_push", "kernel"}
    if unknown:
        raise ConfigError(f"loss.active: unknown kinds {sorted(unknown)}")
    if "out" in cfg.loss.active and cfg.loss.K ** cfg.n_dropout < 2:
        raise ConfigError(
            f"loss: branch consensus needs K^n >= 2, got K={cfg.loss.K} with "
            f"{cfg.n_dropout} dropout layers"
        )
    groups = {s.group for s in cfg.arch if s.kind == "conv"}
    if cfg.loss.kernel_groups is not None and not (cfg.loss.kernel_groups & groups):
        raise ConfigError(
            f"loss.kernel_groups {sorted(cfg.loss.kernel_groups)} select no conv "
            f"layers (present groups: {sorted(groups)})"
        )


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    cfg = resolve_config(raw, overrides)
    return cfg
