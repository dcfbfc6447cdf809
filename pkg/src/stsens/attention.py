"""Attention-pattern profiles and variable-selection importance tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


def aggregate_attention(tensors) -> np.ndarray:
    """Mean over heads and windows of ``[H, n, d_s, d_s]`` attention arrays.

    Accepts one array or a sequence of arrays (chunks of windows); every
    window carries equal weight.
    """
    if isinstance(tensors, np.ndarray):
        tensors = [tensors]
    tensors = [np.asarray(t, dtype=np.float64) for t in tensors]
    if not tensors or sum(t.shape[1] for t in tensors) == 0:
        raise ValueError("need at least one window")
    d_s = {t.shape[2:] for t in tensors}
    if len(d_s) != 1:
        raise ValueError(f"inconsistent sequence lengths across windows: {sorted(d_s)}")
    total = sum(t.sum(axis=(0, 1)) for t in tensors)
    count = sum(t.shape[0] * t.shape[1] for t in tensors)
    return total / count


def lag_profile(mean_attention: np.ndarray, past_len: int = 13) -> np.ndarray:
    """Attention of the one-step-ahead position over the past inputs.

    Entry ``k`` holds lag ``k - past_len`` (so index 0 is lag -past_len and
    the last entry is lag -1).
    """
    m = np.asarray(mean_attention, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {m.shape}")
    if m.shape[0] < past_len + 1:
        raise ValueError(f"d_s={m.shape[0]} too small for past_len={past_len}")
    return m[past_len, :past_len].copy()


def lags(past_len: int = 13) -> np.ndarray:
    return np.arange(-past_len, 0)


def daily_attention(starts, rows, past_len: int | None = None):
    """Average one-step-ahead attention mass per calendar date.

    ``starts`` are the forecast-start dates of each window and ``rows`` the
    matching ``[n, past_len]`` attention rows over the past inputs.  The past
    position ``j`` of a window starting on ``s`` is the date
    ``s - past_len + j``.  Each date is averaged over the windows in which it
    is visible.  Returns ``(dates, values, counts)`` sorted by date.
    """
    starts = np.asarray(starts, dtype="datetime64[D]")
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] != starts.shape[0]:
        raise ValueError("rows must be [n_windows, past_len] aligned with starts")
    past_len = rows.shape[1] if past_len is None else past_len
    if len(starts) == 0:
        return np.array([], dtype="datetime64[D]"), np.array([]), np.array([], dtype=int)
    day = starts.astype(np.int64)[:, None] - past_len + np.arange(past_len)[None, :]
    lo = int(day.min())
    idx = (day - lo).ravel()
    sums = np.bincount(idx, weights=rows.ravel())
    counts = np.bincount(idx)
    seen = counts > 0
    dates = (np.flatnonzero(seen) + lo).astype("datetime64[D]")
    return dates, sums[seen] / counts[seen], counts[seen]


@dataclass
class ImportanceTable:
    static: dict[str, float]
    observed: dict[str, float]
    known: dict[str, float]

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for role in ("static", "observed", "known"):
            for name, pct in getattr(self, role).items():
                out.append((role, name, pct))
        return out


def _percent(weights: np.ndarray, names: Sequence[str]) -> dict[str, float]:
    total = weights.sum()
    if total <= 0:
        raise ValueError("selection weights sum to zero")
    return {n: float(100.0 * w / total) for n, w in zip(names, weights)}


def variable_importance(
    vsn_weights: dict[str, np.ndarray],
    static_names: Sequence[str],
    past_names: Sequence[str],
    future_names: Sequence[str],
) -> ImportanceTable:
    """Sum selection weights over windows and time steps, normalise per role.

    The past selection network also sees the known-future features; they are
    left out of the observed column (which is renormalised over the remaining
    features) and reported only under ``known`` from the future network.
    """
    st = np.asarray(vsn_weights["static"]).reshape(-1, len(static_names)).sum(axis=0)
    past = np.asarray(vsn_weights["past"]).reshape(-1, len(past_names)).sum(axis=0)
    fut = np.asarray(vsn_weights["future"]).reshape(-1, len(future_names)).sum(axis=0)
    known = set(future_names)
    obs_idx = [i for i, n in enumerate(past_names) if n not in known]
    return ImportanceTable(
        static=_percent(st, static_names),
        observed=_percent(past[obs_idx], [past_names[i] for i in obs_idx]),
        known=_percent(fut, future_names),
    )


def past_known_importance(vsn_weights: dict[str, np.ndarray], past_names: Sequence[str]) -> dict[str, float]:
    """Share of the past selection weights (all past inputs) per feature."""
    past = np.asarray(vsn_weights["past"]).reshape(-1, len(past_names)).sum(axis=0)
    return _percent(past, past_names)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    return repr(float(v))


def write_attention_mean(mean: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = mean.shape[0]
        w.writerow(["row"] + [f"c{j}" for j in range(d)])
        for i in range(d):
            w.writerow([i] + [_fmt(v) for v in mean[i]])


def write_lag_profile(profile: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "value"])
        for lag, v in zip(lags(len(profile)), profile):
            w.writerow([int(lag), _fmt(v)])


def write_daily_attention(dates, values, observed, counts, path) -> None:
    """``windows`` is how many windows saw each date; edge dates have fewer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "attention", "observed_target", "windows"])
        for d, v, o, n in zip(dates, values, observed, counts):
            w.writerow([str(d), _fmt(v), _fmt(o), int(n)])


def write_importance(table: ImportanceTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["role", "feature", "percent"])
        for role, name, pct in table.rows():
            w.writerow([role, name, _fmt(pct)])


def write_all(directory, mean, profile, daily, table) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "attention_mean": directory / "attention_mean.csv",
        "lag_profile": directory / "lag_profile.csv",
        "daily_attention": directory / "daily_attention.csv",
        "importance": directory / "importance.csv",
    }
    write_attention_mean(mean, paths["attention_mean"])
    write_lag_profile(profile, paths["lag_profile"])
    write_daily_attention(*daily, paths["daily_attention"])
    write_importance(table, paths["importance"])
    return paths
