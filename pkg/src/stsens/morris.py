"""Morris-style sensitivity for spatio-temporal panels.

The spatio-temporal index perturbs one input feature by ``delta`` everywhere
(all counties, all dates), re-runs the model, and accumulates the absolute
change of the output over every (county, date) cell::

    G       = sum_t sum_c |Y_delta[c, t] - Y[c, t]|
    mu_star = G / (C * T * delta)
    scaled  = mu_star * sigma_i

``sigma_i`` is the raw (unscaled) standard deviation of the feature over the
training range.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import FeaturePanel, WindowSpec, make_windows, to_date
from .model import ModelConfig, predict

log = logging.getLogger(__name__)

# a panel -> [C, T] matrix of outputs, one cell per (county, date)
PanelModel = Callable[[FeaturePanel], np.ndarray]

CSV_FIELDS = ["feature", "delta", "G", "C", "T", "mu_star", "sigma", "scaled_index"]


def elementary_effect(model: Callable[[np.ndarray], float], x, i: int, delta: float) -> float:
    """(y(x_1, ..., x_i + delta, ..., x_k) - y(x)) / delta for a scalar model."""
    if delta == 0:
        raise ValueError("delta must be non-zero")
    x = np.asarray(x, dtype=np.float64)
    xp = x.copy()
    xp[i] += delta
    y0, y1 = float(model(x)), float(model(xp))
    if not (np.isfinite(y0) and np.isfinite(y1)):
        raise FloatingPointError("model returned a non-finite value")
    return (y1 - y0) / delta


def perturb_feature(panel: FeaturePanel, feature: str, delta: float) -> FeaturePanel:
    """Copy of ``panel`` with ``delta`` added to every cell of ``feature``."""
    role = panel.feature_roles.get(feature)
    if role is None:
        raise KeyError(f"unknown feature {feature!r}")
    if role == "known":
        raise ValueError(f"{feature!r} is a derived known-future feature and cannot be perturbed")
    out = panel.copy()
    out.feature_values(feature)[...] += delta
    return out


@dataclass
class MorrisRow:
    delta: float
    G: float
    mu_star: float
    scaled_index: float


@dataclass
class MorrisResult:
    feature: str
    sigma: float
    C: int
    T: int
    rows: list[MorrisRow] = field(default_factory=list)

    def at(self, delta: float) -> MorrisRow:
        for r in self.rows:
            if r.delta == delta:
                return r
        raise KeyError(f"delta {delta} not evaluated")

    def csv_rows(self) -> list[dict]:
        return [
            {
                "feature": self.feature,
                "delta": r.delta,
                "G": r.G,
                "C": self.C,
                "T": self.T,
                "mu_star": r.mu_star,
                "sigma": self.sigma,
                "scaled_index": r.scaled_index,
            }
            for r in self.rows
        ]


def total_change(y_delta: np.ndarray, y: np.ndarray) -> float:
    """G accumulated with a fixed (date-major, county-minor) summation order."""
    diff = np.abs(np.asarray(y_delta, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    return float(np.sum(diff.T))


def delta_sweep(
    model: PanelModel,
    panel: FeaturePanel,
    feature: str,
    deltas: Sequence[float],
    sigma: float = 1.0,
    baseline: np.ndarray | None = None,
) -> MorrisResult:
    """Normalized and scaled index for each ``delta``; the baseline run is shared."""
    deltas = list(deltas)
    if not deltas:
        raise ValueError("need at least one delta")
    if any(d == 0 for d in deltas):
        raise ValueError("delta must be non-zero")
    y = model(panel) if baseline is None else baseline
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.size == 0:
        raise ValueError(f"model must return a non-empty [C, T] matrix, got shape {y.shape}")
    C, T = y.shape
    result = MorrisResult(feature=feature, sigma=float(sigma), C=C, T=T)
    for d in deltas:
        y_d = np.asarray(model(perturb_feature(panel, feature, d)), dtype=np.float64)
        if y_d.shape != y.shape:
            raise ValueError("perturbed run returned a different output shape")
        G = total_change(y_d, y)
        mu = G / (C * T * abs(d))
        result.rows.append(MorrisRow(delta=float(d), G=G, mu_star=float(mu), scaled_index=float(mu * sigma)))
    return result


def normalized_morris(model: PanelModel, panel: FeaturePanel, feature: str, delta: float, sigma: float = 1.0) -> MorrisResult:
    return delta_sweep(model, panel, feature, [delta], sigma)


def one_step_model(
    params: dict,
    config: ModelConfig,
    target: str | int = 0,
    date_range=None,
    spec: WindowSpec | None = None,
) -> PanelModel:
    """Wrap a trained network as ``panel -> Y[C, T]``.

    ``Y[c, t]`` is the one-step-ahead prediction (first horizon step) of
    ``target`` for the window whose forecast starts on date ``t``; only
    start dates inside ``date_range`` are kept.
    """
    spec = spec or WindowSpec(config.past_len, config.horizon)
    tidx = target if isinstance(target, int) else config.target_names.index(target)
    lo = to_date(date_range[0]) if date_range else None
    hi = to_date(date_range[1]) if date_range else None

    def run(panel: FeaturePanel) -> np.ndarray:
        windows = make_windows(panel, spec)
        keep = np.ones(len(windows), dtype=bool)
        if lo is not None:
            keep &= (windows.start >= lo) & (windows.start <= hi)
        if not keep.any():
            raise ValueError("no windows start inside the evaluation range")
        windows = windows.take(np.flatnonzero(keep))
        y = predict(windows, params, config).predictions[:, 0, tidx]
        # windows are county-major with equal counts per county
        return y.reshape(panel.n_counties, -1)

    return run


def write_csv(results: Sequence[MorrisResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for res in results:
            for row in res.csv_rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


# ---------------------------------------------------------------------------
# subgroup experiments


@dataclass
class SubgroupRow:
    subgroup: str
    train_loss: float | None
    subgroup_index: float | None
    shared_index: float | None
    error: str | None = None


def subgroup_experiment(
    raw_panel: FeaturePanel,
    subgroups: Sequence[str],
    shared_feature: str,
    split_spec,
    model_kwargs: dict | None = None,
    train_config=None,
    deltas: Sequence[float] = (0.005,),
    report_delta: float = 0.005,
    target: str | int = 0,
    window_spec: WindowSpec | None = None,
) -> list[SubgroupRow]:
    """Train one model per static subgroup column and score its sensitivity.

    Each model sees exactly one static feature (the subgroup) plus all dynamic
    features of ``raw_panel``.  A failing subgroup is recorded and skipped.
    """
    from .pipeline import prepare, train_model  # local import: pipeline imports this module

    missing = [s for s in subgroups if s not in raw_panel.static_names]
    if missing:
        raise KeyError(f"subgroup columns not in static features: {missing}")
    if report_delta not in deltas:
        deltas = list(deltas) + [report_delta]
    rows = []
    for sub in subgroups:
        try:
            idx = raw_panel.static_names.index(sub)
            p = raw_panel.copy()
            p.static = p.static[:, [idx]]
            p.static_names = [sub]
            prep = prepare(p, split_spec, window_spec=window_spec)
            params, cfg, report = train_model(prep, model_kwargs or {}, train_config)
            model = one_step_model(params, cfg, target, date_range=split_spec.train, spec=prep.window_spec)
            base = model(prep.scaled)
            res_sub = delta_sweep(model, prep.scaled, sub, deltas, float(prep.scaler.std[prep.scaler.index(sub)]), base)
            res_sh = delta_sweep(
                model, prep.scaled, shared_feature, deltas, float(prep.scaler.std[prep.scaler.index(shared_feature)]), base
            )
            rows.append(
                SubgroupRow(
                    subgroup=sub,
                    train_loss=report.train_loss[report.best_epoch],
                    subgroup_index=res_sub.at(report_delta).scaled_index,
                    shared_index=res_sh.at(report_delta).scaled_index,
                )
            )
        except Exception as exc:  # noqa: BLE001 - one subgroup must not sink the batch
            log.warning("subgroup %s failed: %s", sub, exc)
            rows.append(SubgroupRow(sub, None, None, None, error=f"{type(exc).__name__}: {exc}"))
    return rows


def write_subgroup_csv(rows: Sequence[SubgroupRow], shared_feature: str, delta: float, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subgroup", "training_loss", f"scaled_index_delta_{delta}", f"{shared_feature}_scaled_index_delta_{delta}", "error"])
        for r in rows:
            w.writerow([r.subgroup, r.train_loss, r.subgroup_index, r.shared_index, r.error or ""])
    return path
