"""Glue between the modules: prepare panels, train, evaluate, analyse.

The CLI and the acceptance tests both go through these helpers so that the
same code path is exercised everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as attn
from .data import (
    CleanReport,
    FeaturePanel,
    ScalerState,
    SplitSpec,
    WindowBatch,
    WindowSpec,
    apply_scaler,
    clean_outliers,
    fit_scaler,
    make_windows,
    split,
    unscale_targets,
)
from .metrics import MetricsReport, evaluate, persistence_forecast
from .model import ModelConfig, init_params, predict
from .train import TrainConfig, TrainReport, train


@dataclass
class Prepared:
    """A cleaned panel (target units), its scaled twin and the fitted scaler."""

    raw: FeaturePanel
    scaled: FeaturePanel
    scaler: ScalerState
    split_spec: SplitSpec
    window_spec: WindowSpec
    clean_report: CleanReport | None = None

    def split_panels(self, scaled: bool = True):
        return split(self.scaled if scaled else self.raw, self.split_spec, self.window_spec.past_len)

    def windows(self) -> tuple[WindowBatch, WindowBatch, WindowBatch]:
        return tuple(make_windows(p, self.window_spec) for p in self.split_panels())


def prepare(panel: FeaturePanel, split_spec: SplitSpec, multiplier: float = 7.5, window_spec: WindowSpec | None = None, clean: bool = True) -> Prepared:
    window_spec = window_spec or WindowSpec()
    report = None
    if clean:
        panel, report = clean_outliers(panel, multiplier)
    scaler = fit_scaler(panel, split_spec.train)
    return Prepared(panel, apply_scaler(panel, scaler), scaler, split_spec, window_spec, report)


def train_model(prep: Prepared, model_kwargs: dict, train_config: TrainConfig | None = None):
    """Build a model for ``prep`` and train it; returns (params, config, report)."""
    train_config = train_config or TrainConfig()
    tr, va, _ = prep.windows()
    cfg = ModelConfig.from_batch(tr, **model_kwargs)
    params, report = train(tr, va, cfg, train_config, init_params(cfg, train_config.seed))
    return params, cfg, report


def evaluate_split(params, config: ModelConfig, scaler: ScalerState, windows: WindowBatch) -> tuple[MetricsReport, MetricsReport]:
    """Metrics for the network and the persistence baseline in target units."""
    obs = unscale_targets(windows.targets, windows.target_names, scaler)
    pred = unscale_targets(predict(windows, params, config).predictions, windows.target_names, scaler)
    past = unscale_targets(windows.past_targets(), windows.target_names, scaler)
    base = persistence_forecast(past, windows.targets.shape[1])
    return evaluate(pred, obs, windows.target_names, "tft"), evaluate(base, obs, windows.target_names, "baseline")


@dataclass
class AttentionAnalysis:
    mean: np.ndarray
    profile: np.ndarray
    daily: tuple  # (dates, attention, observed target, window count)
    importance: attn.ImportanceTable


def analyse_attention(params, config: ModelConfig, windows: WindowBatch, raw_panel: FeaturePanel | None = None, target: int = 0, chunk: int = 512) -> AttentionAnalysis:
    total = None
    rows, starts, weights = [], [], {"static": [], "past": [], "future": []}
    count = 0
    sp = config.past_len
    for b in windows.iter_batches(chunk):
        out = predict(b, params, config)
        s = out.attention.sum(axis=(0, 1))
        total = s if total is None else total + s
        count += out.attention.shape[0] * out.attention.shape[1]
        rows.append(out.attention_mean[:, sp, :sp])
        starts.append(b.start)
        for k in weights:
            weights[k].append(out.vsn_weights[k])
    mean = total / count
    profile = attn.lag_profile(mean, sp)
    dates, values, counts = attn.daily_attention(np.concatenate(starts), np.concatenate(rows), sp)
    if raw_panel is not None:
        series = raw_panel.targets[:, :, target].mean(axis=0)
        pos = (dates - raw_panel.dates[0]).astype(np.int64)
        observed = series[pos]
    else:
        observed = np.full(len(dates), np.nan)
    table = attn.variable_importance(
        {k: np.concatenate(v) for k, v in weights.items()},
        config.static_names,
        config.past_names,
        config.future_names,
    )
    return AttentionAnalysis(mean, profile, (dates, values, observed, counts), table)


# ---------------------------------------------------------------------------
# prepared-panel archive


def save_prepared(prep: Prepared, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "county_ids": prep.raw.county_ids,
        "dynamic_names": prep.raw.dynamic_names,
        "static_names": prep.raw.static_names,
        "target_names": prep.raw.target_names,
        "known_names": prep.raw.known_names,
        "scaler": prep.scaler.to_dict(),
        "split": {k: [str(a), str(b)] for k, (a, b) in vars(prep.split_spec).items()},
        "window": vars(prep.window_spec),
        "clean_report": prep.clean_report.rows() if prep.clean_report else None,
        "load_report": prep.raw.load_report,
    }
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        dates=prep.raw.dates.astype(np.int64),
        dynamic=prep.raw.dynamic,
        static=prep.raw.static,
        targets=prep.raw.targets,
        known=prep.raw.known,
    )
    return path


def load_prepared(path) -> Prepared:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        raw = FeaturePanel(
            county_ids=meta["county_ids"],
            dates=z["dates"].astype("datetime64[D]"),
            dynamic=z["dynamic"],
            static=z["static"],
            targets=z["targets"],
            known=z["known"],
            dynamic_names=meta["dynamic_names"],
            static_names=meta["static_names"],
            target_names=meta["target_names"],
            known_names=meta["known_names"],
            load_report=meta.get("load_report") or {},
        )
    scaler = ScalerState.from_dict(meta["scaler"])
    sp = SplitSpec(**{k: tuple(v) for k, v in meta["split"].items()})
    return Prepared(raw, apply_scaler(raw, scaler), scaler, sp, WindowSpec(**meta["window"]))
