"""Flat run configuration shared by the experiment runner and the command line.

A run is described by a flat ``key -> value`` document with ``model.``,
``train.``, ``data.`` and ``eval.`` namespaces.  Unknown keys are rejected,
values are type-checked against the defaults, and every artifact carries a
fingerprint of the resolved document.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import ContractError
from .models import ModelSpec
from .train import TrainConfig

DEFAULTS: dict[str, Any] = {
    # model
    "model.cell": "matlstm",
    "model.strategy": "encoder_predictor",
    "model.hidden": [10, 10],
    "model.layers": 1,
    "model.loss": "auto",
    "model.conditional_decoding": True,
    "model.input_transform": "identity",
    "model.context_len": None,
    "model.head_layers": 2,
    "model.dropout": 0.1,
    "model.tied_decoder": False,
    "model.layer_training": "layerwise",
    # training
    "train.learning_rate": 3e-4,
    "train.batch_size": 64,
    "train.max_epochs": 100,
    "train.patience": 10,
    "train.clip_norm": 5.0,
    "train.val_fraction": 0.2,
    "train.min_rel_improvement": 1e-6,
    # data
    "data.kind": "synth",
    "data.seed": 0,
    "data.n_sequences": 5000,
    "data.n_r": 10,
    "data.n_c": 10,
    "data.T": 20,
    "data.outlier_ratio": 0.05,
    "data.shift_min": 1,
    "data.shift_max": 5,
    "data.fixed_shift": False,
    "data.fixed_permutation": False,
    "data.noise": "none",
    "data.noise_p": 0.2,
    "data.canvas": [28, 28],
    "data.sprite_size": 8,
    "data.speed": 1.5,
    "data.curvature": 0.05,
    "data.jitter": 0,
    "data.permute": True,
    "data.permutation_scope": "dataset",
    "data.glyphs": None,
    "data.train_path": None,
    "data.test_path": None,
    # evaluation
    "eval.seeds": [0, 1, 2],
    "eval.f1_threshold": "eval",
}

NAMESPACES = ("model", "train", "data", "eval")
DATA_KINDS = ("synth", "sprites", "file")
NOISE_KINDS = ("none", "zero", "salt_pepper")
F1_MODES = ("eval", "validation")

# keys that do not change what the data looks like, only which draw or how much
_DATA_INSTANCE_KEYS = ("data.seed", "data.n_sequences", "data.train_path", "data.test_path")


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if raw is None:
        return None
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false", "1", "0"):
            return raw.lower() in ("true", "1")
        raise ContractError(f"{key}: expected true/false, got {raw!r}")
    if isinstance(default, (int, float)):
        try:
            num = float(raw)
        except (TypeError, ValueError):
            num = None
        if isinstance(raw, bool) or num is None:
            raise ContractError(f"{key}: expected a number, got {raw!r}")
        if isinstance(default, int):
            if not num.is_integer():
                raise ContractError(f"{key}: expected an integer, got {raw!r}")
            return int(num)
        return num
    if isinstance(default, list):
        if not isinstance(raw, (list, tuple)):
            raise ContractError(f"{key}: expected a list, got {raw!r}")
        return [int(v) if isinstance(v, (int, float)) and float(v).is_integer() else v for v in raw]
    if isinstance(default, str) and not isinstance(raw, str):
        raise ContractError(f"{key}: expected a string, got {raw!r}")
    return raw


def parse_value(text: str) -> Any:
    """Value of a ``--set key=value`` override: JSON if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    @classmethod
    def build(cls, doc: Mapping[str, Any] | None = None, overrides: Iterable[str] = ()) -> "RunConfig":
        merged = dict(DEFAULTS)
        for source in (doc or {},):
            for key, raw in source.items():
                merged[key] = raw
        for item in overrides:
            if "=" not in item:
                raise ContractError(f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            merged[key.strip()] = parse_value(text)
        unknown = sorted(k for k in merged if k not in DEFAULTS)
        if unknown:
            raise ContractError(f"unknown config key(s): {', '.join(unknown)}")
        values = {k: _coerce(k, v) for k, v in merged.items()}
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ContractError(f"config {path} is not valid JSON: {exc}") from exc
            if not isinstance(doc, dict):
                raise ContractError(f"config {path} must be a flat JSON object")
        return cls.build(doc, overrides)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_values(self, **updates: Any) -> "RunConfig":
        """Copy with keys given as ``model__hidden=[..]`` (``__`` stands for ``.``)."""
        doc = dict(self.values)
        doc.update({k.replace("__", "."): v for k, v in updates.items()})
        return RunConfig.build(doc)

    def validate(self) -> None:
        v = self.values
        if v["data.kind"] not in DATA_KINDS:
            raise ContractError(f"data.kind must be one of {DATA_KINDS}, got {v['data.kind']!r}")
        if v["data.noise"] not in NOISE_KINDS:
            raise ContractError(f"data.noise must be one of {NOISE_KINDS}, got {v['data.noise']!r}")
        if v["eval.f1_threshold"] not in F1_MODES:
            raise ContractError(f"eval.f1_threshold must be one of {F1_MODES}")
        if not v["eval.seeds"]:
            raise ContractError("eval.seeds must not be empty")
        if v["data.kind"] == "file" and not v["data.train_path"]:
            raise ContractError("data.kind=file needs data.train_path")
        self.train_config(0)  # validates train.*

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def namespace(self, ns: str) -> dict:
        return {k: v for k, v in self.to_dict().items() if k.startswith(ns + ".")}

    # ------------------------------------------------------------ resolution

    def frame_shape(self) -> tuple[int, int]:
        if self["data.kind"] == "sprites":
            return tuple(self["data.canvas"])
        return self["data.n_r"], self["data.n_c"]

    def model_spec(self, input_shape: tuple[int, int] | None = None, binary: bool = True) -> ModelSpec:
        """The model described by ``model.*``; ``loss=auto`` picks BCE for data in [0, 1]."""
        loss = self["model.loss"]
        if loss == "auto":
            loss = "bce_with_logits" if binary else "frobenius_mse"
        return ModelSpec(
            input_shape=tuple(input_shape or self.frame_shape()),
            cell=self["model.cell"],
            strategy=self["model.strategy"],
            hidden=tuple(self["model.hidden"]),
            layers=self["model.layers"],
            loss=loss,
            conditional_decoding=self["model.conditional_decoding"],
            input_transform=self["model.input_transform"],
            context_len=self["model.context_len"],
            head_layers=self["model.head_layers"],
            dropout=self["model.dropout"],
            tied_decoder=self["model.tied_decoder"],
            layer_training=self["model.layer_training"],
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["train.learning_rate"],
            batch_size=self["train.batch_size"],
            max_epochs=self["train.max_epochs"],
            patience=self["train.patience"],
            clip_norm=self["train.clip_norm"],
            seed=seed,
            val_fraction=self["train.val_fraction"],
            min_rel_improvement=self["train.min_rel_improvement"],
        )

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def data_fingerprint(self) -> str:
        """Identifies the data distribution and shape, not the particular draw."""
        return fingerprint({k: v for k, v in self.namespace("data").items() if k not in _DATA_INSTANCE_KEYS})


def fingerprint(doc: Mapping[str, Any]) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (tuple, np.ndarray)):
        return list(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def derive_seed(*parts: int) -> int:
    """A 32-bit seed determined by a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])
