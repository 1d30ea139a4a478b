"""Flat dotted-key run configuration.

A run's configuration is the defaults below, overlaid by an optional
UTF-8 JSON file (an object of dotted keys), overlaid by command-line
overrides. Unknown keys and mistyped values are rejected so typos fail
loudly instead of silently using a default.
"""
from __future__ import annotations

import json

from .encoder import ModelConfig
from .errors import ConfigError
from .pretrain import PretrainConfig
from .simlearn import LossConfig, TrainConfig

__all__ = ["DEFAULTS", "RunConfig", "load_config"]

DEFAULTS = {
    "model.frames": 8,
    "model.image_size": 16,
    "model.patch_size": 8,
    "model.d_model": 32,
    "model.heads": 4,
    "model.depth": 2,
    "model.embed_dim": 16,
    "model.variant": "toy",
    "predmae.steps": 200,
    "predmae.batch": 4,
    "predmae.mask_ratio": 0.9,
    "predmae.base_lr": 5e-4,
    "predmae.lr_scale": "batch",
    "predmae.weight_decay": 0.0,
    "predmae.decoder_heads": 4,
    "loss.alpha": 2.0,
    "loss.beta": 50.0,
    "loss.lam": 1.0,
    "loss.eps": 0.1,
    "loss.gamma": 0.1,
    "loss.w1": 1.0,
    "loss.w2": 0.01,
    "bank.capacity": 4096,
    "train.steps": 300,
    "train.batch": 4,
    "train.base_lr": 5e-4,
    "train.lr_scale": "batch",
    "train.weight_decay": 0.0,
    "train.mix_prob": 0.5,
    "eval.k": 3,
    "eval.task": "dsvr",
    "synth.corpus": 200,
    "synth.queries": 20,
    "synth.per_label": 2,
}


def _coerce(key: str, value, want):
    if isinstance(want, bool) or isinstance(value, bool):
        # no boolean keys exist today; reject rather than guess
        raise ConfigError(f"config key '{key}' does not accept booleans")
    if isinstance(want, float) and isinstance(value, int):
        return float(value)
    if type(value) is not type(want):
        raise ConfigError(f"config key '{key}' wants "
                          f"{type(want).__name__}, got "
                          f"{type(value).__name__} ({value!r})")
    return value


class RunConfig:
    """Resolved configuration; values accessed by dotted key."""

    def __init__(self, values: dict):
        self._values = dict(values)

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key '{key}'") from None

    def as_dict(self) -> dict:
        return dict(self._values)

    def resolved_json(self) -> str:
        return json.dumps(self._values, sort_keys=True)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            frames=self["model.frames"],
            image_size=self["model.image_size"],
            patch_size=self["model.patch_size"],
            d_model=self["model.d_model"],
            heads=self["model.heads"],
            depth=self["model.depth"],
            embed_dim=self["model.embed_dim"],
            variant=self["model.variant"],
        )

    def pretrain_config(self, seed: int, steps=None,
                        batch=None) -> PretrainConfig:
        return PretrainConfig(
            steps=self["predmae.steps"] if steps is None else steps,
            batch=self["predmae.batch"] if batch is None else batch,
            mask_ratio=self["predmae.mask_ratio"],
            base_lr=self["predmae.base_lr"],
            lr_scale=self["predmae.lr_scale"],
            weight_decay=self["predmae.weight_decay"],
            decoder_heads=self["predmae.decoder_heads"],
            seed=seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self["loss.alpha"],
            beta=self["loss.beta"],
            lam=self["loss.lam"],
            eps=self["loss.eps"],
            gamma=self["loss.gamma"],
            w1=self["loss.w1"],
            w2=self["loss.w2"],
        )

    def train_config(self, seed: int, steps=None, batch=None) -> TrainConfig:
        return TrainConfig(
            steps=self["train.steps"] if steps is None else steps,
            batch=self["train.batch"] if batch is None else batch,
            base_lr=self["train.base_lr"],
            lr_scale=self["train.lr_scale"],
            weight_decay=self["train.weight_decay"],
            bank_capacity=self["bank.capacity"],
            mix_prob=self["train.mix_prob"],
            seed=seed,
            loss=self.loss_config(),
        )


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- JSON file at `path` <- `overrides`, validated."""
    values = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        layers.append(raw)
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = _coerce(key, value, DEFAULTS[key])
    return RunConfig(values)
