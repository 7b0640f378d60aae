"""Flat key=value run configuration for the CLI.

One option per line, `#` starts a comment, unknown keys are rejected, and
parse -> serialize -> parse is a fixed point. Model keys mirror the model
config fields; the remaining keys steer the optimizer, split, epochs, and
augmentation policy.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .data import AUGMENT_OPS, AugmentationPolicy, SplitSpec
from .errors import ConfigError
from .model import ModelConfig, _parse_field
from .train import OptimizerConfig

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    optimizer: str = "adam"
    lr: float = 0.003
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 4
    max_steps: int = 0           # 0 = no cap
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    augment: tuple[str, ...] = AUGMENT_OPS
    rotate_degrees: float = 25.0

    @staticmethod
    def desk(**model_overrides) -> "RunConfig":
        return RunConfig(model=ModelConfig.desk(**model_overrides),
                         batch_size=2)

    @staticmethod
    def paper(**model_overrides) -> "RunConfig":
        return RunConfig(model=ModelConfig.paper(**model_overrides),
                         epochs=100)

    def opt_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer, lr=self.lr,
                               beta1=self.beta1, beta2=self.beta2,
                               eps=self.adam_eps, momentum=self.momentum)

    def policy(self) -> AugmentationPolicy:
        flags = {op: op in self.augment for op in AUGMENT_OPS}
        return AugmentationPolicy(rotate_degrees=self.rotate_degrees, **flags)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(ratios=self.split, seed=self.split_seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed the whole run: model init, split shuffle, epoch shuffles."""
        return dataclasses.replace(
            self, model=dataclasses.replace(self.model, seed=seed),
            split_seed=seed)

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in self.model.to_pairs()]
        lines += [
            f"optimizer={self.optimizer}",
            f"lr={self.lr!r}",
            f"momentum={self.momentum!r}",
            f"beta1={self.beta1!r}",
            f"beta2={self.beta2!r}",
            f"adam_eps={self.adam_eps!r}",
            f"epochs={self.epochs}",
            f"batch_size={self.batch_size}",
            f"max_steps={self.max_steps}",
            "split=" + ",".join(repr(r) for r in self.split),
            f"split_seed={self.split_seed}",
            "augment=" + (",".join(self.augment) if self.augment else "none"),
            f"rotate_degrees={self.rotate_degrees!r}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str, base: "RunConfig | None" = None) -> "RunConfig":
        cfg = base if base is not None else RunConfig()
        model_kwargs = {}
        run_kwargs = {}
        for lineno, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, "
                                  f"got '{raw_line.strip()}'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in _MODEL_KEYS:
                model_kwargs[key] = _parse_field(key, value)
            elif key in _RUN_PARSERS:
                run_kwargs[key] = _RUN_PARSERS[key](value)
            else:
                raise ConfigError(f"unknown config key '{key}'")
        model = dataclasses.replace(cfg.model, **model_kwargs)
        model.validate()
        out = dataclasses.replace(cfg, model=model, **run_kwargs)
        out.validate()
        return out

    def validate(self) -> None:
        self.model.validate()
        self.opt_config()
        self.split_spec()
        if self.epochs < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("epochs/max_steps must be >= 0, batch_size >= 1")
        for op in self.augment:
            if op not in AUGMENT_OPS:
                raise ConfigError(f"unknown augmentation '{op}' in config")


def _parse_float(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"expected a number, got '{value}'")


def _parse_int(value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"expected an integer, got '{value}'")


def _parse_split(value: str) -> tuple[float, float, float]:
    parts = value.split(",")
    if len(parts) != 3:
        raise ConfigError(f"split needs three ratios, got '{value}'")
    return tuple(_parse_float(p) for p in parts)


def _parse_augment(value: str) -> tuple[str, ...]:
    if value in ("none", ""):
        return ()
    if value == "full":
        return AUGMENT_OPS
    ops_ = tuple(v.strip() for v in value.split(","))
    for op in ops_:
        if op not in AUGMENT_OPS:
            raise ConfigError(f"unknown augmentation '{op}'")
    return ops_


_RUN_PARSERS = {
    "optimizer": lambda v: v,
    "lr": _parse_float,
    "momentum": _parse_float,
    "beta1": _parse_float,
    "beta2": _parse_float,
    "adam_eps": _parse_float,
    "epochs": _parse_int,
    "batch_size": _parse_int,
    "max_steps": _parse_int,
    "split": _parse_split,
    "split_seed": _parse_int,
    "augment": _parse_augment,
    "rotate_degrees": _parse_float,
}
