"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment.  ``none`` clears an optional key.
Unknown keys and bad values are collected and reported together.
"""
from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import KernelConfig, MMLConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class RunConfig:
    name: str = "dmtfd"
    window_size: int = 60
    stride: int = 10
    batch_size: int = 128
    k: int = 10
    epsilon: float | None = None
    interp_alpha: str = "uniform"  # "uniform" or a number in [0, 1]
    prior_alpha: float = 0.5
    sigma: float | None = None  # none: batch median distance
    beta: float = 2.0
    lr: float = 0.01
    epochs: int = 200
    n_blocks: int = 1
    hidden_size: int = 32
    head_dim: int = 16
    seed: int = 15
    train_split: float = 0.6
    val_split: float = 0.2
    loss_weight_manifold_po: float = 1.0
    loss_weight_manifold_ne: float = 5.0
    flow_input: str = "window"
    label_column: str = "label"
    dtype: str = "float32"
    nu: float | None = None  # accepted and recorded, not used
    # synthetic data generator
    synth_modes: int = 3
    synth_entities: int = 8
    synth_length: int = 20_000
    synth_anomaly_rate: float = 0.05

    def to_train_config(self) -> TrainConfig:
        alpha = self.interp_alpha if self.interp_alpha == "uniform" else float(self.interp_alpha)
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.lr,
            seed=self.seed,
            window_size=self.window_size,
            stride=self.stride,
            k=self.k,
            epsilon=self.epsilon,
            n_blocks=self.n_blocks,
            hidden_size=self.hidden_size,
            head_dim=self.head_dim,
            interp_alpha=alpha,
            mml=MMLConfig(
                prior_alpha=self.prior_alpha,
                weight_po=self.loss_weight_manifold_po,
                weight_ne=self.loss_weight_manifold_ne,
                kernel=KernelConfig(sigma=self.sigma, beta=self.beta),
            ),
            flow_input=self.flow_input,
            train_split=self.train_split,
            val_split=self.val_split,
            dtype=self.dtype,
            nu=self.nu,
        )

    def validate(self) -> None:
        problems = []
        try:
            self.to_train_config()
        except ValueError as exc:
            problems += str(exc).split("; ")
        if self.interp_alpha != "uniform":
            try:
                a = float(self.interp_alpha)
                if not 0.0 <= a <= 1.0:
                    problems.append("interp_alpha must be 'uniform' or lie in [0, 1]")
            except ValueError:
                problems.append(f"interp_alpha: expected 'uniform' or a number, got {self.interp_alpha!r}")
        if not 0 < self.train_split < 1 or not 0 <= self.val_split < 1 or self.train_split + self.val_split >= 1:
            problems.append("need 0 < train_split, 0 <= val_split, train_split + val_split < 1")
        if self.beta > 2:
            problems.append("beta must lie in (0, 2]")
        if problems:
            raise ConfigError(problems)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _base_type(f: dataclasses.Field) -> str:
    return str(f.type).split("|")[0].strip()


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    optional = "None" in str(f.type)
    if optional and raw.lower() == "none":
        return None
    kind = _base_type(f)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            near = difflib.get_close_matches(key, _FIELDS, n=1)
            hint = f" (did you mean {near[0]!r}?)" if near else ""
            problems.append(f"{source}:{lineno}: unknown key {key!r}{hint}")
            continue
        if key in values:
            problems.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError:
            problems.append(f"{source}:{lineno}: {key}: cannot parse {raw!r} as {_base_type(_FIELDS[key])}")
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ConfigError as exc:
        problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return parse(text, str(path))


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))
