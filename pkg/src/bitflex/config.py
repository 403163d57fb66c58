"""Run configuration: a strictly validated YAML document describing one
training run (architecture, quantization policy, regime, dataset, plan).
Unknown keys are rejected everywhere so typos fail loudly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import SHARED, SWITCHABLE, get_architecture
from .quant import QuantScheme, check_bits
from .train import TrainPlan

ENV_DATA_DIR = "BITFLEX_DATA_DIR"

REGIMES = ("individual", "joint-vanilla", "joint-scl", "progressive-asc", "progressive-desc")

REGIME_MODES = {
    "individual": (SHARED, SHARED),
    "joint-vanilla": (SWITCHABLE, SHARED),
    "joint-scl": (SWITCHABLE, SWITCHABLE),
    "progressive-asc": (SHARED, SHARED),
    "progressive-desc": (SHARED, SHARED),
}


def _take(d: dict, allowed: dict, context: str) -> dict:
    """Pop known keys with defaults; reject unknown ones."""
    if not isinstance(d, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")
    out = dict(allowed)
    out.update(d)
    return out


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 10
    image_size: int = 16
    n_train: int = 10000
    n_test: int = 2000
    seed: int = 123
    signal: float = 0.32
    noise: float = 0.22
    confusion: float = 0.35
    data_dir: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        vals = _take(d, {f: getattr(cls, f) for f in cls.__dataclass_fields__}, "dataset")
        cfg = cls(**vals)
        if cfg.kind not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'idx', got {cfg.kind!r}")
        if cfg.kind == "synthetic":
            if cfg.classes < 2 or cfg.image_size < 4:
                raise ConfigError("dataset: classes >= 2 and image_size >= 4 required")
            if cfg.n_train <= 0 or cfg.n_test <= 0:
                raise ConfigError("dataset: n_train and n_test must be positive")
        else:
            missing = [f for f in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(cfg, f) is None]
            if missing:
                raise ConfigError(f"dataset: idx datasets need {missing}")
        return cfg

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        if path.is_absolute():
            return path
        base = self.data_dir or os.environ.get(ENV_DATA_DIR, ".")
        return Path(base) / path

    def load(self):
        """Returns (x_train, y_train, x_test, y_test); images uint8
        [N, 1, H, W], labels int64."""
        from .io import read_idx, synthetic_dataset

        if self.kind == "synthetic":
            return synthetic_dataset(self.n_train, self.n_test, self.image_size,
                                     self.classes, self.seed, self.signal,
                                     self.noise, self.confusion)
        def images(p):
            arr = read_idx(self.resolve_path(p))
            if arr.ndim == 2:  # [N, H*W] is not meaningful for images
                raise ConfigError(f"dataset: {p} must hold [N,H,W] images")
            return arr[:, None, :, :]

        def labels(p):
            arr = read_idx(self.resolve_path(p))
            if arr.ndim != 1:
                raise ConfigError(f"dataset: {p} must hold a 1-d label vector")
            return arr.astype("int64")

        return (images(self.train_images), labels(self.train_labels),
                images(self.test_images), labels(self.test_labels))


@dataclass
class RunConfig:
    arch: str
    scheme: QuantScheme
    bits: tuple[int, ...]
    regime: str
    output_dir: str
    train_bit: int | None = None
    seed: int = 0
    alpha_init: float = 8.0
    pretrain_epochs: int = 10
    init_from: str | None = None
    plan: TrainPlan = field(default_factory=TrainPlan)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        top = _take(d, {
            "arch": None, "scheme": None, "bits": None, "regime": None,
            "output_dir": None, "train_bit": None, "seed": 0, "alpha_init": 8.0,
            "pretrain_epochs": 10, "init_from": None, "plan": {}, "dataset": {},
        }, "config")
        for req in ("arch", "scheme", "bits", "regime", "output_dir"):
            if top[req] is None:
                raise ConfigError(f"config: missing required key {req!r}")

        get_architecture(top["arch"])  # existence check
        scheme = QuantScheme.parse(top["scheme"])
        if not isinstance(top["bits"], (list, tuple)) or not top["bits"]:
            raise ConfigError("config: bits must be a non-empty list")
        bits = tuple(sorted({check_bits(b) for b in top["bits"]}, reverse=True))

        regime = top["regime"]
        if regime not in REGIMES:
            raise ConfigError(f"config: regime must be one of {list(REGIMES)}, got {regime!r}")
        if regime == "individual":
            if top["train_bit"] is None:
                raise ConfigError("config: individual regime requires train_bit")
            if check_bits(top["train_bit"], "train_bit") not in bits:
                raise ConfigError(f"config: train_bit {top['train_bit']} not in bits {list(bits)}")
        elif len(bits) < 2:
            raise ConfigError(f"config: regime {regime!r} requires at least 2 bit-widths")

        plan_vals = _take(top["plan"], {f: getattr(TrainPlan, f)
                                        for f in TrainPlan.__dataclass_fields__}, "plan")
        plan_vals["seed"] = plan_vals["seed"] if "seed" in top.get("plan", {}) else top["seed"]
        plan = TrainPlan(**plan_vals)

        if top["pretrain_epochs"] < 0:
            raise ConfigError("config: pretrain_epochs must be >= 0")
        if top["alpha_init"] <= 0:
            raise ConfigError("config: alpha_init must be positive")

        return cls(arch=top["arch"], scheme=scheme, bits=bits, regime=regime,
                   output_dir=str(top["output_dir"]), train_bit=top["train_bit"],
                   seed=int(top["seed"]), alpha_init=float(top["alpha_init"]),
                   pretrain_epochs=int(top["pretrain_epochs"]),
                   init_from=top["init_from"], plan=plan,
                   dataset=DatasetConfig.from_dict(top["dataset"]))

    @property
    def modes(self) -> tuple[str, str]:
        """(bn_mode, clip_mode) implied by the regime."""
        return REGIME_MODES[self.regime]

    def to_dict(self) -> dict:
        return {
            "arch": self.arch, "scheme": self.scheme.value, "bits": list(self.bits),
            "regime": self.regime, "output_dir": self.output_dir,
            "train_bit": self.train_bit, "seed": self.seed,
            "alpha_init": self.alpha_init, "pretrain_epochs": self.pretrain_epochs,
            "init_from": self.init_from,
            "plan": {f: getattr(self.plan, f) for f in TrainPlan.__dataclass_fields__},
            "dataset": {f: getattr(self.dataset, f)
                        for f in DatasetConfig.__dataclass_fields__},
        }


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path}: invalid YAML: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path}: top level must be a mapping")
    return RunConfig.from_dict(doc)
