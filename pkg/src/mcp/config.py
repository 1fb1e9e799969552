"""Run configuration: flat `section.key = value` text files.

Every key has a default; unknown keys are rejected, malformed values are
reported with their line number, and the fully resolved configuration is
echoed into the output directory so any run can be reproduced from its echo.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .evaluate import EvalConfig
from .losses import LossConfig
from .model import ArchConfig
from .seeding import derive_seed
from .train import (BRANCH_MODES, CIP_SPEED_MODES, VIEW_MODES, TrainConfig)


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None
                         else f"line {line}: {message}")
        self.line = line


def _parse_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(","))


def _choice(options):
    def convert(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {raw!r}")
        return raw
    return convert


# key -> (converter, default, help)
SCHEMA: dict[str, tuple] = {
    "run.out_dir": (str, "", "output directory; empty uses $MCP_OUT or ./mcp_out"),
    "run.seed": (int, 7, "master seed; every substream derives from it"),
    "run.threads": (int, 1, "worker cap for parallel-safe stages"),

    "dataset.num_classes": (int, 8, "motion-pattern classes (max 8)"),
    "dataset.train_per_class": (int, 25, "training videos per class"),
    "dataset.test_per_class": (int, 10, "test videos per class"),
    "dataset.frames": (int, 64, "frames per video (>= 48)"),
    "dataset.size": (int, 32, "square frame size in pixels"),

    "loss.gamma": (float, 2.0, "speed-perception hinge margin"),
    "loss.tau": (float, 0.1, "InfoNCE temperature"),
    "loss.alpha": (float, 0.5, "weight of the speed branch in the joint loss"),

    "model.channels": (_parse_int_tuple, (8, 16, 32, 64),
                       "encoder stage widths, comma separated"),
    "model.proj_hidden": (int, 64, "projection head hidden width"),
    "model.proj_dim": (int, 128, "projection embedding dimension"),
    "model.cls_hidden": (int, 64, "classification head hidden width"),
    "model.normalize_projections": (_parse_bool, True,
                                    "L2-normalize projection outputs"),
    "model.feature_norm": (_parse_bool, True,
                           "batch-norm the pooled feature before the heads"),

    "train.batch_size": (int, 16, "videos per step (>= 2)"),
    "train.base_lr": (float, 0.05, "base learning rate before batch scaling"),
    "train.momentum": (float, 0.9, "SGD momentum"),
    "train.weight_decay": (float, 1e-4, "SGD weight decay"),
    "train.epochs": (int, 20, "pretraining epochs"),
    "train.branch_mode": (_choice(BRANCH_MODES), "JOINT",
                          "JOINT, MIP_ONLY, or CIP_ONLY"),
    "train.cip_speed_mode": (_choice(CIP_SPEED_MODES), "DIFFERENT",
                             "speed pairing for the instance branch"),
    "train.t": (int, 4, "frame gap of the motion view"),
    "train.view_mode": (_choice(VIEW_MODES), "LONG_RES",
                        "LONG_RES or RESIDUAL (forces gap 1)"),
    "train.clip_len": (int, 16, "frames per clip"),
    "train.augment": (_parse_bool, True, "apply clip augmentation"),
    "train.center_sampling": (_parse_bool, False,
                              "center clips on the least-similar frame pair"),
    "train.save_every": (int, 10, "periodic checkpoint interval; 0 disables"),

    "eval.finetune_epochs": (int, 10, "classification fine-tune epochs"),
    "eval.finetune_lr": (float, 0.005, "classification fine-tune learning rate"),
    "eval.finetune_batch": (int, 16, "classification fine-tune batch size"),
    "eval.clips_per_video": (int, 1, "clips averaged per retrieval embedding"),
    "eval.ks": (_parse_int_tuple, (1, 5, 10, 20, 50), "retrieval depths"),
}


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 8
    train_per_class: int = 25
    test_per_class: int = 10
    frames: int = 64
    size: int = 32


@dataclass
class RunConfig:
    out_dir: str
    seed: int
    threads: int
    dataset: DatasetConfig
    loss: LossConfig
    arch: ArchConfig
    train: TrainConfig
    eval: EvalConfig


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings; duplicate keys keep the last assignment."""
    values: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value' in {source}",
                              line=lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r} in {source}", line=lineno)
        try:
            SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line=lineno) from exc
        values[key] = value
    return values


def apply_overrides(values: dict[str, str], overrides: list[str]) -> None:
    """`--set section.key=value` pairs, applied after file parsing."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form "
                              "section.key=value")
        key, _, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r} in override")
        try:
            SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        values[key] = value


def expected_keys_help() -> str:
    lines = ["expected keys (section.key = value):"]
    lines += [f"  {key} = {_canonical(default)}  # {help_}"
              for key, (_, default, help_) in SCHEMA.items()]
    return "\n".join(lines)


def resolve(values: dict[str, str]) -> RunConfig:
    """Defaults plus parsed values, materialized into the module configs."""
    def get(key: str):
        conv, default, _ = SCHEMA[key]
        return conv(values[key]) if key in values else default

    out_dir = get("run.out_dir") or os.environ.get("MCP_OUT", "") or "mcp_out"
    seed = get("run.seed")
    dataset = DatasetConfig(
        num_classes=get("dataset.num_classes"),
        train_per_class=get("dataset.train_per_class"),
        test_per_class=get("dataset.test_per_class"),
        frames=get("dataset.frames"),
        size=get("dataset.size"))
    loss = LossConfig(gamma=get("loss.gamma"), tau=get("loss.tau"),
                      alpha=get("loss.alpha"))
    arch = ArchConfig(
        channels=get("model.channels"),
        proj_hidden=get("model.proj_hidden"),
        proj_dim=get("model.proj_dim"),
        cls_hidden=get("model.cls_hidden"),
        normalize_projections=get("model.normalize_projections"),
        feature_norm=get("model.feature_norm"))
    train_cfg = TrainConfig(
        batch_size=get("train.batch_size"),
        base_lr=get("train.base_lr"),
        momentum=get("train.momentum"),
        weight_decay=get("train.weight_decay"),
        epochs=get("train.epochs"),
        seed=derive_seed(seed, "train"),
        loss=loss,
        branch_mode=get("train.branch_mode"),
        cip_speed_mode=get("train.cip_speed_mode"),
        t=get("train.t"),
        view_mode=get("train.view_mode"),
        clip_len=get("train.clip_len"),
        augment=get("train.augment"),
        center_sampling=get("train.center_sampling"),
        save_every=get("train.save_every"))
    eval_cfg = EvalConfig(
        finetune_epochs=get("eval.finetune_epochs"),
        finetune_lr=get("eval.finetune_lr"),
        finetune_batch=get("eval.finetune_batch"),
        clips_per_video=get("eval.clips_per_video"),
        clip_len=get("train.clip_len"),
        augment=get("train.augment"),
        ks=get("eval.ks"))
    return RunConfig(out_dir=out_dir, seed=seed, threads=get("run.threads"),
                     dataset=dataset, loss=loss, arch=arch, train=train_cfg,
                     eval=eval_cfg)


def _canonical(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump(cfg: RunConfig) -> str:
    """Canonical echo of the resolved configuration; parses back identically."""
    current = {
        "run.out_dir": cfg.out_dir,
        "run.seed": cfg.seed,
        "run.threads": cfg.threads,
        "dataset.num_classes": cfg.dataset.num_classes,
        "dataset.train_per_class": cfg.dataset.train_per_class,
        "dataset.test_per_class": cfg.dataset.test_per_class,
        "dataset.frames": cfg.dataset.frames,
        "dataset.size": cfg.dataset.size,
        "loss.gamma": cfg.loss.gamma,
        "loss.tau": cfg.loss.tau,
        "loss.alpha": cfg.loss.alpha,
        "model.channels": cfg.arch.channels,
        "model.proj_hidden": cfg.arch.proj_hidden,
        "model.proj_dim": cfg.arch.proj_dim,
        "model.cls_hidden": cfg.arch.cls_hidden,
        "model.normalize_projections": cfg.arch.normalize_projections,
        "model.feature_norm": cfg.arch.feature_norm,
        "train.batch_size": cfg.train.batch_size,
        "train.base_lr": cfg.train.base_lr,
        "train.momentum": cfg.train.momentum,
        "train.weight_decay": cfg.train.weight_decay,
        "train.epochs": cfg.train.epochs,
        "train.branch_mode": cfg.train.branch_mode,
        "train.cip_speed_mode": cfg.train.cip_speed_mode,
        "train.t": cfg.train.t,
        "train.view_mode": cfg.train.view_mode,
        "train.clip_len": cfg.train.clip_len,
        "train.augment": cfg.train.augment,
        "train.center_sampling": cfg.train.center_sampling,
        "train.save_every": cfg.train.save_every,
        "eval.finetune_epochs": cfg.eval.finetune_epochs,
        "eval.finetune_lr": cfg.eval.finetune_lr,
        "eval.finetune_batch": cfg.eval.finetune_batch,
        "eval.clips_per_video": cfg.eval.clips_per_video,
        "eval.ks": cfg.eval.ks,
    }
    return "\n".join(f"{key} = {_canonical(current[key])}"
                     for key in SCHEMA) + "\n"


def load(path: str | None, overrides: list[str]) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = open(path, encoding="utf-8").read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}")
        values = parse_text(text, source=str(path))
    apply_overrides(values, overrides)
    return resolve(values)
