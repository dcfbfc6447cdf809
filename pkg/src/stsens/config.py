"""Flat ``section.key=value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SplitSpec, SynthConfig, WindowSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _names(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


# every accepted key and how to parse its value
KEYS = {
    "seed": int,
    "data.static": str,
    "data.dynamic": str,
    "data.targets": str,
    "data.start": str,
    "data.end": str,
    "data.prepared": str,
    "synth.counties": int,
    "synth.days": int,
    "synth.seed": int,
    "synth.weekly_amplitude": float,
    "synth.noise_std": float,
    "synth.phase_drift": float,
    "synth.feature_coeffs": SynthConfig.parse_coeffs,
    "synth.static_features": _names,
    "synth.base_level": float,
    "synth.ar_coef": float,
    "synth.death_rate": float,
    "synth.start_date": str,
    "split.kind": str,
    "split.train_start": str,
    "split.train_end": str,
    "split.val_start": str,
    "split.val_end": str,
    "split.test_start": str,
    "split.test_end": str,
    "split.train_fraction": float,
    "split.val_fraction": float,
    "clean.multiplier": float,
    "clean.enabled": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "window.past_len": int,
    "window.horizon": int,
    "model.d_model": int,
    "model.n_heads": int,
    "model.dropout": float,
    "model.checkpoint": str,
    "train.learning_rate": float,
    "train.batch_size": int,
    "train.max_epochs": int,
    "train.early_stop_patience": int,
    "train.grad_clip_norm": float,
    "morris.features": _names,
    "morris.deltas": _floats,
    "morris.target": str,
    "morris.start": str,
    "morris.end": str,
    "grid.learning_rate": _floats,
    "grid.d_model": _ints,
    "grid.n_heads": _ints,
    "grid.grad_clip_norm": _floats,
    "grid.dropout": _floats,
    "subgroup.columns": _names,
    "subgroup.shared": str,
    "attention.target": str,
}


def parse_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = (p.strip() for p in line.split("=", 1))
        raw[k] = v
    return raw


def parse_values(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        if k not in KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            out[k] = KEYS[k](v) if isinstance(v, str) else v
        except ValueError as exc:
            raise ConfigError(f"bad value for {k!r}: {exc}") from None
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    source: str | None = None

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        raw = parse_text(path.read_text(), str(path))
        return cls(parse_values(raw), raw, str(path))

    def override(self, key: str, value) -> None:
        parsed = parse_values({key: value})
        self.values.update(parsed)
        self.raw[key] = str(value)

    def get(self, key: str, default=None):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, default)

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    @property
    def seed(self) -> int:
        return int(self.values.get("seed", 0))

    def synth_config(self) -> SynthConfig:
        kv = self.section("synth")
        kv.setdefault("seed", self.seed)
        return SynthConfig.from_mapping(kv)

    def window_spec(self) -> WindowSpec:
        return WindowSpec(**self.section("window"))

    def split_spec(self, dates, kind: str | None = None) -> SplitSpec:
        kind = kind or self.get("split.kind", "custom")
        if kind == "primary":
            return SplitSpec.primary()
        if kind != "custom":
            raise ConfigError(f"split.kind must be 'primary' or 'custom', got {kind!r}")
        s = self.section("split")
        explicit = [f"{p}_{e}" for p in ("train", "val", "test") for e in ("start", "end")]
        if any(k in s for k in explicit):
            missing = [k for k in explicit if k not in s]
            if missing:
                raise ConfigError(f"custom split needs all of split.{{train,val,test}}_{{start,end}}; missing {missing}")
            return SplitSpec(
                train=(s["train_start"], s["train_end"]),
                validation=(s["val_start"], s["val_end"]),
                test=(s["test_start"], s["test_end"]),
            )
        ws = self.window_spec()
        return SplitSpec.from_fractions(
            np.asarray(dates),
            s.get("train_fraction", 0.7),
            s.get("val_fraction", 0.15),
            context=ws.past_len,
            horizon=ws.horizon,
        )

    def model_kwargs(self) -> dict:
        return {k: v for k, v in self.section("model").items() if k in ("d_model", "n_heads", "dropout")}

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.section("train"))

    def grid(self) -> dict:
        return self.section("grid")
