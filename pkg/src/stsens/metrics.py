"""Forecast metrics (MAE, RMSE, SMAPE, NSE/NNSE) and the persistence baseline.

All metrics pool every (county, date, horizon) cell before averaging.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SMAPE_CONVENTION = "mean(2|yhat-y|/(|y|+|yhat|)), cells with y=yhat=0 contribute 0"


def _pair(pred, obs):
    p = np.asarray(pred, dtype=np.float64)
    o = np.asarray(obs, dtype=np.float64)
    if p.shape != o.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs obs {o.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one value")
    return p, o


def mae(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.mean(np.abs(p - o)))


def rmse(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.sqrt(np.mean((p - o) ** 2)))


def smape(pred, obs) -> float:
    p, o = _pair(pred, obs)
    denom = np.abs(o) + np.abs(p)
    num = 2.0 * np.abs(p - o)
    ratio = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(np.mean(ratio))


def nnse(pred, obs) -> tuple[float, float]:
    """Return ``(nse, nnse)`` with NNSE = 1 / (2 - NSE)."""
    p, o = _pair(pred, obs)
    var = float(np.sum((o - o.mean()) ** 2))
    if var == 0.0:
        raise ValueError("observations have zero variance; NSE is undefined")
    nse = 1.0 - float(np.sum((o - p) ** 2)) / var
    return nse, 1.0 / (2.0 - nse)


def persistence_forecast(past_targets, horizon: int = 15) -> np.ndarray:
    """Repeat the last observed value over the horizon.

    ``past_targets`` is ``[..., s_past, F]``; the result is ``[..., horizon, F]``.
    """
    past = np.asarray(past_targets, dtype=np.float64)
    if past.ndim < 2 or past.shape[-2] == 0:
        raise ValueError("persistence needs a non-empty past window")
    last = past[..., -1:, :]
    return np.repeat(last, horizon, axis=-2)


@dataclass
class TargetMetrics:
    mae: float
    rmse: float
    smape: float
    nse: float
    nnse: float


@dataclass
class MetricsReport:
    model: str
    per_target: dict[str, TargetMetrics]
    n_windows: int
    smape_convention: str = SMAPE_CONVENTION
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict:
        out = {"model": self.model, "n_windows": self.n_windows, "smape_convention": self.smape_convention}
        for t, m in self.per_target.items():
            for k, v in asdict(m).items():
                out[f"{t}.{k}"] = v
        out.update(self.extra)
        return out

    def csv_rows(self) -> list[dict]:
        return [{"model": self.model, "target": t, **asdict(m)} for t, m in self.per_target.items()]


def evaluate(pred, obs, target_names, model: str = "model") -> MetricsReport:
    """Metrics per target for arrays ``[n, horizon, F_tgt]`` in target units."""
    p, o = _pair(pred, obs)
    per = {}
    for f, name in enumerate(target_names):
        pf, of = p[..., f], o[..., f]
        nse_v, nnse_v = nnse(pf, of)
        per[name] = TargetMetrics(mae(pf, of), rmse(pf, of), smape(pf, of), nse_v, nnse_v)
    return MetricsReport(model=model, per_target=per, n_windows=int(p.shape[0]))


def write_reports(reports: list[MetricsReport], directory) -> None:
    """``metrics.json`` (flat key-value per model) and ``metrics.csv`` (one row per model/target)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "metrics.json", "w") as fh:
        json.dump({r.model: r.flat() for r in reports}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = [row for r in reports for row in r.csv_rows()]
    with open(directory / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "target", "mae", "rmse", "smape", "nse", "nnse"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
