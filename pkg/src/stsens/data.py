"""Panel ingestion, cleaning, scaling, known-future features, splits and windows."""

from __future__ import annotations

import csv
import datetime as dt
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

KNOWN_FEATURES = ("SinWeekly", "CosWeekly", "LinearSpace")
DEFAULT_MULTIPLIER = 7.5


class PanelError(ValueError):
    """Raised for malformed input files or inconsistent panels."""


def to_date(value) -> np.datetime64:
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]")
    if isinstance(value, (dt.date, dt.datetime)):
        return np.datetime64(value.isoformat()[:10], "D")
    return np.datetime64(str(value).strip(), "D")


def weekday(dates: np.ndarray) -> np.ndarray:
    """Day of week with Monday=0 (1970-01-01 was a Thursday)."""
    days = np.asarray(dates, dtype="datetime64[D]").astype(np.int64)
    return (days + 3) % 7


@dataclass
class FeaturePanel:
    county_ids: list[str]
    dates: np.ndarray  # datetime64[D], contiguous
    dynamic: np.ndarray  # [C, T, F_obs]
    static: np.ndarray  # [C, F_stat]
    targets: np.ndarray  # [C, T, F_tgt]
    known: np.ndarray  # [C, T, F_known]
    dynamic_names: list[str]
    static_names: list[str]
    target_names: list[str]
    known_names: list[str] = field(default_factory=lambda: list(KNOWN_FEATURES))
    load_report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.dynamic = np.asarray(self.dynamic, dtype=np.float64)
        self.static = np.asarray(self.static, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.known = np.asarray(self.known, dtype=np.float64)
        self.validate()

    @property
    def n_counties(self) -> int:
        return len(self.county_ids)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def feature_roles(self) -> dict[str, str]:
        roles = {}
        for names, role in (
            (self.static_names, "static"),
            (self.dynamic_names, "observed"),
            (self.known_names, "known"),
            (self.target_names, "target"),
        ):
            for n in names:
                roles[n] = role
        return roles

    def validate(self) -> None:
        C, T = len(self.county_ids), len(self.dates)
        if C < 1 or T < 1:
            raise PanelError(f"panel needs at least one county and one date, got C={C}, T={T}")
        if len(set(self.county_ids)) != C:
            raise PanelError("county ids are not unique")
        if T > 1 and np.any(np.diff(self.dates.astype(np.int64)) != 1):
            raise PanelError("dates must be strictly increasing with no gaps")
        checks = (
            ("dynamic", self.dynamic, (C, T, len(self.dynamic_names))),
            ("static", self.static, (C, len(self.static_names))),
            ("targets", self.targets, (C, T, len(self.target_names))),
            ("known", self.known, (C, T, len(self.known_names))),
        )
        for name, arr, shape in checks:
            if arr.shape != shape:
                raise PanelError(f"{name} array has shape {arr.shape}, expected {shape}")
        all_names = self.static_names + self.dynamic_names + self.known_names + self.target_names
        if len(set(all_names)) != len(all_names):
            dup = sorted({n for n in all_names if all_names.count(n) > 1})
            raise PanelError(f"feature names with more than one role: {dup}")

    def date_index(self, date) -> int:
        d = to_date(date)
        i = int((d - self.dates[0]).astype(np.int64))
        if not 0 <= i < self.n_days:
            raise PanelError(f"date {d} outside panel range {self.dates[0]}..{self.dates[-1]}")
        return i

    def restrict(self, start, end) -> "FeaturePanel":
        """Sub-panel covering [start, end] inclusive."""
        i, j = self.date_index(start), self.date_index(end)
        if j < i:
            raise PanelError(f"empty date range {start}..{end}")
        sl = slice(i, j + 1)
        return replace(
            self,
            dates=self.dates[sl],
            dynamic=self.dynamic[:, sl],
            targets=self.targets[:, sl],
            known=self.known[:, sl],
            load_report=dict(self.load_report),
        )

    def select_counties(self, idx: Sequence[int]) -> "FeaturePanel":
        idx = list(idx)
        return replace(
            self,
            county_ids=[self.county_ids[i] for i in idx],
            dynamic=self.dynamic[idx],
            static=self.static[idx],
            targets=self.targets[idx],
            known=self.known[idx],
        )

    def copy(self) -> "FeaturePanel":
        return replace(
            self,
            county_ids=list(self.county_ids),
            dates=self.dates.copy(),
            dynamic=self.dynamic.copy(),
            static=self.static.copy(),
            targets=self.targets.copy(),
            known=self.known.copy(),
            dynamic_names=list(self.dynamic_names),
            static_names=list(self.static_names),
            target_names=list(self.target_names),
            known_names=list(self.known_names),
            load_report=dict(self.load_report),
        )

    def feature_values(self, name: str) -> np.ndarray:
        role = self.feature_roles.get(name)
        if role == "static":
            return self.static[:, self.static_names.index(name)]
        if role == "observed":
            return self.dynamic[:, :, self.dynamic_names.index(name)]
        if role == "target":
            return self.targets[:, :, self.target_names.index(name)]
        if role == "known":
            return self.known[:, :, self.known_names.index(name)]
        raise KeyError(f"unknown feature {name!r}")


# ---------------------------------------------------------------------------
# known-future features


def derive_known_future(dates, county_ids: Sequence[str]) -> np.ndarray:
    """SinWeekly, CosWeekly and LinearSpace for every (county, date).

    Weekly terms use ``2*pi*dow/7`` with Monday=0; LinearSpace is the county's
    ordinal position min-max scaled to [0, 1] (0.0 when there is one county).
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    C, T = len(county_ids), len(dates)
    angle = 2.0 * np.pi * weekday(dates) / 7.0
    out = np.empty((C, T, 3))
    out[:, :, 0] = np.sin(angle)[None, :]
    out[:, :, 1] = np.cos(angle)[None, :]
    lin = np.arange(C, dtype=np.float64) / (C - 1) if C > 1 else np.zeros(1)
    out[:, :, 2] = lin[:, None]
    return out


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path: Path, expected_header: Sequence[str] | None = None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if expected_header is not None and header != list(expected_header):
            raise PanelError(f"{path}:1: header {header} != expected {list(expected_header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            yield reader.line_num, header, row


def _read_static(path: Path):
    ids, values, names = [], [], None
    for lineno, header, row in _read_rows(path):
        if header[0] != "fips":
            raise PanelError(f"{path}:1: first column must be 'fips'")
        names = header[1:]
        if len(row) != len(header):
            raise PanelError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise PanelError(f"{path}:{lineno}: {exc}") from None
        ids.append(row[0].strip())
    if names is None:
        # header-only file
        with open(path) as fh:
            names = [h.strip() for h in fh.readline().split(",")][1:]
    return ids, names, np.array(values, dtype=np.float64).reshape(len(ids), len(names))


def _read_long(path: Path) -> dict[str, dict[np.datetime64, float]]:
    series: dict[str, dict[np.datetime64, float]] = defaultdict(dict)
    for lineno, _, row in _read_rows(path, ("fips", "date", "value")):
        if len(row) != 3:
            raise PanelError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            d = to_date(row[1])
            v = float(row[2])
        except ValueError as exc:
            raise PanelError(f"{path}:{lineno}: {exc}") from None
        series[row[0].strip()][d] = v
    # each file must cover a gap-free date range
    all_dates = sorted({d for s in series.values() for d in s})
    if all_dates:
        expected = np.arange(all_dates[0], all_dates[-1] + 1)
        present = set(all_dates)
        for d in expected:
            if d not in present:
                raise PanelError(f"{path}: missing date {d}")
    return series


def _expand_paths(spec) -> list[Path]:
    if isinstance(spec, (str, Path)):
        p = Path(spec)
        if p.is_dir():
            files = sorted(p.glob("*.csv"))
            if not files:
                raise PanelError(f"{p}: no CSV files")
            return files
        return [p]
    return [Path(s) for s in spec]


def load_panel(static_path, dynamic_path, target_path, date_range=None) -> FeaturePanel:
    """Read the static, dynamic and target CSV files into a panel.

    ``dynamic_path`` and ``target_path`` may each be a directory of long-form
    files (one feature per file, feature name = file stem), a single file, or
    a list of files.  Cells before a feature's first available date for a
    county are filled with 0.0 and counted in ``panel.load_report``.
    """
    static_path = Path(static_path)
    if not static_path.exists():
        raise PanelError(f"{static_path}: no such file")
    ids, static_names, static = _read_static(static_path)
    id_pos = {c: i for i, c in enumerate(ids)}

    dyn = {p.stem: _read_long(p) for p in _expand_paths(dynamic_path)}
    tgt = {p.stem: _read_long(p) for p in _expand_paths(target_path)}

    missing = sorted({c for s in list(dyn.values()) + list(tgt.values()) for c in s} - set(ids))
    if missing:
        raise PanelError(f"counties missing from static file: {missing}")

    if date_range is None:
        tdates = [d for s in tgt.values() for cs in s.values() for d in cs]
        if not tdates:
            raise PanelError("target files contain no rows")
        start, end = min(tdates), max(tdates)
    else:
        start, end = to_date(date_range[0]), to_date(date_range[1])
    dates = np.arange(start, end + 1)
    C, T = len(ids), len(dates)

    report = {"filled_before_first_date": {}}

    def assemble(sources, fill_leading: bool):
        arr = np.zeros((C, T, len(sources)))
        for f, (name, series) in enumerate(sources.items()):
            filled = 0
            for c in ids:
                s = series.get(c, {})
                first = min(s) if s else None
                for t, d in enumerate(dates):
                    if d in s:
                        arr[id_pos[c], t, f] = s[d]
                    elif fill_leading and (first is None or d < first):
                        filled += 1
                    else:
                        raise PanelError(f"{name}: no value for county {c} on {d}")
            if fill_leading:
                report["filled_before_first_date"][name] = filled
        return arr

    dynamic = assemble(dyn, fill_leading=True)
    targets = assemble(tgt, fill_leading=False)
    return FeaturePanel(
        county_ids=ids,
        dates=dates,
        dynamic=dynamic,
        static=static,
        targets=targets,
        known=derive_known_future(dates, ids),
        dynamic_names=list(dyn),
        static_names=static_names,
        target_names=list(tgt),
        load_report=report,
    )


def write_panel_csvs(panel: FeaturePanel, directory) -> dict[str, Path]:
    """Write ``static.csv``, ``dynamic/<feature>.csv`` and ``targets/<target>.csv``."""
    directory = Path(directory)
    (directory / "dynamic").mkdir(parents=True, exist_ok=True)
    (directory / "targets").mkdir(parents=True, exist_ok=True)
    with open(directory / "static.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fips", *panel.static_names])
        for c, row in zip(panel.county_ids, panel.static):
            w.writerow([c, *(repr(float(v)) for v in row)])

    def write_long(path, arr):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fips", "date", "value"])
            for ci, c in enumerate(panel.county_ids):
                for ti, d in enumerate(panel.dates):
                    w.writerow([c, str(d), repr(float(arr[ci, ti]))])

    for f, name in enumerate(panel.dynamic_names):
        write_long(directory / "dynamic" / f"{name}.csv", panel.dynamic[:, :, f])
    for f, name in enumerate(panel.target_names):
        write_long(directory / "targets" / f"{name}.csv", panel.targets[:, :, f])
    return {
        "static": directory / "static.csv",
        "dynamic": directory / "dynamic",
        "targets": directory / "targets",
    }


# ---------------------------------------------------------------------------
# outliers


@dataclass(frozen=True)
class OutlierBounds:
    q1: float
    q3: float
    iqr: float
    lower: float
    upper: float
    multiplier: float = DEFAULT_MULTIPLIER


def compute_outlier_bounds(series, multiplier: float = DEFAULT_MULTIPLIER) -> OutlierBounds:
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot compute outlier bounds of an empty series")
    q1, q3 = np.quantile(x, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    return OutlierBounds(
        q1=float(q1),
        q3=float(q3),
        iqr=float(iqr),
        lower=float(q1 - multiplier * iqr),
        upper=float(q3 + multiplier * iqr),
        multiplier=multiplier,
    )


@dataclass
class CleanReport:
    bounds: dict[str, OutlierBounds]
    clipped: dict[str, int]
    before: dict[str, tuple[float, float]]  # (mean, std)
    after: dict[str, tuple[float, float]]

    def rows(self) -> list[dict]:
        return [
            {
                "feature": name,
                "lower": b.lower,
                "upper": b.upper,
                "clipped": self.clipped[name],
                "mean_before": self.before[name][0],
                "std_before": self.before[name][1],
                "mean_after": self.after[name][0],
                "std_after": self.after[name][1],
            }
            for name, b in self.bounds.items()
        ]


def clean_outliers(panel: FeaturePanel, multiplier: float = DEFAULT_MULTIPLIER):
    """Clip every static, observed and target feature to its pooled IQR fence.

    Returns ``(cleaned_panel, CleanReport)``; the input panel is not modified.
    """
    out = panel.copy()
    bounds, clipped, before, after = {}, {}, {}, {}
    groups = (
        (out.static_names, out.static, lambda a, f: a[:, f]),
        (out.dynamic_names, out.dynamic, lambda a, f: a[:, :, f]),
        (out.target_names, out.targets, lambda a, f: a[:, :, f]),
    )
    for names, arr, view in groups:
        for f, name in enumerate(names):
            v = view(arr, f)
            b = compute_outlier_bounds(v, multiplier)
            before[name] = (float(v.mean()), float(v.std()))
            clipped[name] = int(np.count_nonzero((v < b.lower) | (v > b.upper)))
            np.clip(v, b.lower, b.upper, out=v)
            after[name] = (float(v.mean()), float(v.std()))
            bounds[name] = b
    return out, CleanReport(bounds, clipped, before, after)


# ---------------------------------------------------------------------------
# scaling


@dataclass
class ScalerState:
    names: list[str]
    minimum: np.ndarray
    maximum: np.ndarray
    std: np.ndarray  # raw std over the fit range, used by the scaled Morris index
    fitted_on: str = "train"

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"scaler has no feature {name!r}") from None

    def scale_values(self, name: str, x):
        i = self.index(name)
        span = self.maximum[i] - self.minimum[i]
        x = np.asarray(x, dtype=np.float64)
        if span <= 0:
            return np.zeros_like(x)
        return (x - self.minimum[i]) / span

    def unscale_values(self, name: str, x):
        i = self.index(name)
        span = self.maximum[i] - self.minimum[i]
        return np.asarray(x, dtype=np.float64) * span + self.minimum[i]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "minimum": self.minimum.tolist(),
            "maximum": self.maximum.tolist(),
            "std": self.std.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerState":
        return cls(
            names=list(d["names"]),
            minimum=np.asarray(d["minimum"], dtype=np.float64),
            maximum=np.asarray(d["maximum"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            fitted_on=d.get("fitted_on", "train"),
        )


def fit_scaler(panel: FeaturePanel, date_range=None, fitted_on: str = "train") -> ScalerState:
    """Per-feature min/max (and raw std) of static, observed and target features.

    Dynamic and target statistics use only dates in ``date_range``; static
    features are fitted over all counties.
    """
    p = panel if date_range is None else panel.restrict(*date_range)
    names, lo, hi, sd = [], [], [], []
    for f, name in enumerate(p.static_names):
        v = p.static[:, f]
        names.append(name), lo.append(v.min()), hi.append(v.max()), sd.append(v.std())
    for arr, nm in ((p.dynamic, p.dynamic_names), (p.targets, p.target_names)):
        for f, name in enumerate(nm):
            v = arr[:, :, f]
            names.append(name), lo.append(v.min()), hi.append(v.max()), sd.append(v.std())
    return ScalerState(names, np.array(lo), np.array(hi), np.array(sd), fitted_on)


def _check_scaler(panel: FeaturePanel, state: ScalerState) -> None:
    want = panel.static_names + panel.dynamic_names + panel.target_names
    if sorted(want) != sorted(state.names):
        raise PanelError(
            f"scaler was fitted on features {sorted(state.names)}, panel has {sorted(want)}"
        )


def apply_scaler(panel: FeaturePanel, state: ScalerState) -> FeaturePanel:
    _check_scaler(panel, state)
    out = panel.copy()
    for f, n in enumerate(out.static_names):
        out.static[:, f] = state.scale_values(n, out.static[:, f])
    for f, n in enumerate(out.dynamic_names):
        out.dynamic[:, :, f] = state.scale_values(n, out.dynamic[:, :, f])
    for f, n in enumerate(out.target_names):
        out.targets[:, :, f] = state.scale_values(n, out.targets[:, :, f])
    return out


def invert_scaler(panel: FeaturePanel, state: ScalerState) -> FeaturePanel:
    _check_scaler(panel, state)
    out = panel.copy()
    for f, n in enumerate(out.static_names):
        out.static[:, f] = state.unscale_values(n, out.static[:, f])
    for f, n in enumerate(out.dynamic_names):
        out.dynamic[:, :, f] = state.unscale_values(n, out.dynamic[:, :, f])
    for f, n in enumerate(out.target_names):
        out.targets[:, :, f] = state.unscale_values(n, out.targets[:, :, f])
    return out


def unscale_targets(pred: np.ndarray, target_names: Sequence[str], state: ScalerState) -> np.ndarray:
    """Map predictions ``[..., F_tgt]`` back to target units."""
    out = np.empty_like(pred, dtype=np.float64)
    for f, n in enumerate(target_names):
        out[..., f] = state.unscale_values(n, pred[..., f])
    return out


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowSpec:
    past_len: int = 13
    horizon: int = 15
    stride: int = 1

    def __post_init__(self):
        if self.past_len < 1 or self.horizon < 1 or self.stride < 1:
            raise ValueError("past_len, horizon and stride must all be >= 1")

    @property
    def total_len(self) -> int:
        return self.past_len + self.horizon


@dataclass
class WindowBatch:
    """Sliding-window samples.

    ``past`` stacks observed features, past targets and known features (in that
    order) over the encoder steps; ``future`` holds known features over the
    horizon.
    """

    static: np.ndarray  # [n, F_stat]
    past: np.ndarray  # [n, s_past, F_obs + F_tgt + F_known]
    future: np.ndarray  # [n, s_fut, F_known]
    targets: np.ndarray  # [n, s_fut, F_tgt]
    county: np.ndarray  # [n] county position in the source panel
    start: np.ndarray  # [n] datetime64 of the first forecast step
    past_names: list[str]
    future_names: list[str]
    static_names: list[str]
    target_names: list[str]

    def __len__(self) -> int:
        return len(self.county)

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return replace(
            self,
            static=self.static[idx],
            past=self.past[idx],
            future=self.future[idx],
            targets=self.targets[idx],
            county=self.county[idx],
            start=self.start[idx],
        )

    def past_targets(self) -> np.ndarray:
        k = len(self.past_names) - len(self.future_names) - len(self.target_names)
        return self.past[:, :, k : k + len(self.target_names)]

    def iter_batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator["WindowBatch"]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            yield self.take(order[i : i + batch_size])


def window_count(n_counties: int, n_days: int, spec: WindowSpec) -> int:
    if n_days < spec.total_len:
        return 0
    return n_counties * ((n_days - spec.total_len) // spec.stride + 1)


def make_windows(panel: FeaturePanel, spec: WindowSpec = WindowSpec()) -> WindowBatch:
    T, d_s = panel.n_days, spec.total_len
    if T < d_s:
        raise PanelError(f"panel has {T} days, a window needs {d_s}")
    starts = np.arange(0, T - d_s + 1, spec.stride)
    C = panel.n_counties
    past_all = np.concatenate([panel.dynamic, panel.targets, panel.known], axis=2)
    # [C, n_starts, d_s, F] via fancy indexing on the time axis
    tidx = starts[:, None] + np.arange(d_s)[None, :]
    sp = spec.past_len
    past = past_all[:, tidx[:, :sp], :].reshape(C * len(starts), sp, -1)
    future = panel.known[:, tidx[:, sp:], :].reshape(C * len(starts), spec.horizon, -1)
    targets = panel.targets[:, tidx[:, sp:], :].reshape(C * len(starts), spec.horizon, -1)
    county = np.repeat(np.arange(C), len(starts))
    start = np.tile(panel.dates[starts + sp], C)
    return WindowBatch(
        static=np.repeat(panel.static, len(starts), axis=0),
        past=past,
        future=future,
        targets=targets,
        county=county,
        start=start,
        past_names=panel.dynamic_names + panel.target_names + panel.known_names,
        future_names=list(panel.known_names),
        static_names=list(panel.static_names),
        target_names=list(panel.target_names),
    )


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    validation: tuple
    test: tuple

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            a, b = getattr(self, name)
            object.__setattr__(self, name, (to_date(a), to_date(b)))
            if to_date(b) < to_date(a):
                raise PanelError(f"{name} range ends before it starts")
        if not (self.train[1] < self.validation[0] and self.validation[1] < self.test[0]):
            raise PanelError("split ranges must be disjoint and ordered train < validation < test")

    @classmethod
    def primary(cls) -> "SplitSpec":
        return cls(
            train=("2020-02-29", "2021-11-29"),
            validation=("2021-11-30", "2021-12-14"),
            test=("2021-12-15", "2021-12-29"),
        )

    @classmethod
    def from_fractions(cls, dates, train: float = 0.7, validation: float = 0.15, context: int = 13, horizon: int = 15) -> "SplitSpec":
        """Chronological split of ``dates`` by fraction; the test range gets the rest."""
        dates = np.asarray(dates, dtype="datetime64[D]")
        T = len(dates)
        n_tr = int(round(T * train))
        n_va = int(round(T * validation))
        if n_tr < context + horizon or n_va < horizon or T - n_tr - n_va < horizon:
            raise PanelError(f"{T} days is too short for the requested split fractions")
        return cls(
            train=(dates[0], dates[n_tr - 1]),
            validation=(dates[n_tr], dates[n_tr + n_va - 1]),
            test=(dates[n_tr + n_va], dates[-1]),
        )


def split(panel: FeaturePanel, spec: SplitSpec, context: int = 13):
    """Cut ``panel`` into (train, validation, test) panels.

    Each range is a range of forecast-start dates; the returned panel also
    carries the ``context`` days preceding the range (clamped at the panel's
    first date) so that windows can be formed.
    """
    out = []
    first, last = panel.dates[0], panel.dates[-1]
    for name in ("train", "validation", "test"):
        a, b = getattr(spec, name)
        if a < first or b > last:
            raise PanelError(f"{name} range {a}..{b} outside panel dates {first}..{last}")
        lo = max(a - np.timedelta64(context, "D"), first)
        out.append(panel.restrict(lo, b))
    return tuple(out)


# ---------------------------------------------------------------------------
# synthetic panels


@dataclass
class SynthConfig:
    """Parameters of the synthetic panel generator.

    cases[c, t] = base[c] + amp[c] * weekly_amplitude * sin(2*pi*dow/7 + phase[c, t])
                  + sum_f coeff[f] * x_f[c, t] + noise_std * eps
    deaths[c, t] = death_rate * cases[c, t] + death_rate * noise_std * eps'

    ``base[c] = base_level * (0.5 + s0[c])`` where ``s0`` is the first static
    feature and ``amp[c] ~ U(0.5, 1.5)``.  The phase starts at U(0, 2*pi) and
    follows a random walk with daily step std ``phase_drift``, so a county's
    weekly pattern cannot be recovered from its identity alone.  Each
    observed feature ``x_f`` is a stationary AR(1) process with mean 0.5,
    standard deviation 0.2 and lag-one coefficient ``ar_coef``.  Static
    features are U(0, 1).
    """

    counties: int = 20
    days: int = 300
    seed: int = 0
    weekly_amplitude: float = 10.0
    noise_std: float = 1.0
    phase_drift: float = 0.05
    feature_coeffs: dict[str, float] = field(default_factory=lambda: {"feature_a": 20.0, "feature_b": 2.0})
    static_features: list[str] = field(default_factory=lambda: ["static_0", "static_1"])
    base_level: float = 50.0
    ar_coef: float = 0.9
    death_rate: float = 0.02
    start_date: str = "2020-02-29"

    @staticmethod
    def parse_coeffs(text: str) -> dict[str, float]:
        out = {}
        for i, item in enumerate(p.strip() for p in text.split(",") if p.strip()):
            if ":" in item:
                name, val = item.split(":", 1)
                out[name.strip()] = float(val)
            else:
                out[f"feature_{i}"] = float(item)
        return out

    @classmethod
    def from_mapping(cls, kv: dict) -> "SynthConfig":
        cfg = cls()
        casts = {
            "counties": int,
            "days": int,
            "seed": int,
            "weekly_amplitude": float,
            "noise_std": float,
            "phase_drift": float,
            "base_level": float,
            "ar_coef": float,
            "death_rate": float,
            "start_date": str,
            "feature_coeffs": cls.parse_coeffs,
            "static_features": lambda s: [x.strip() for x in s.split(",") if x.strip()],
        }
        for key, raw in kv.items():
            if key not in casts:
                raise KeyError(f"unknown synthetic config key {key!r}")
            setattr(cfg, key, casts[key](raw) if isinstance(raw, str) else raw)
        return cfg

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        kv = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise PanelError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)


def generate_synthetic(config: SynthConfig) -> FeaturePanel:
    C, T = config.counties, config.days
    if C <= 0 or T <= 0:
        raise ValueError(f"counties and days must be positive, got {C}, {T}")
    rng = np.random.default_rng(config.seed)
    ids = [f"{10001 + i:05d}" for i in range(C)]
    dates = np.arange(to_date(config.start_date), to_date(config.start_date) + T)
    dow = weekday(dates)

    static = rng.uniform(0.0, 1.0, size=(C, len(config.static_features)))
    s0 = static[:, 0] if static.shape[1] else np.full(C, 0.5)
    base = config.base_level * (0.5 + s0)
    amp = rng.uniform(0.5, 1.5, size=C) * config.weekly_amplitude
    steps = config.phase_drift * rng.standard_normal((C, T))
    steps[:, 0] = rng.uniform(0.0, 2.0 * np.pi, size=C)
    phase = np.cumsum(steps, axis=1)
    seasonal = amp[:, None] * np.sin(2.0 * np.pi * dow[None, :] / 7.0 + phase)

    names = list(config.feature_coeffs)
    coeffs = np.array([config.feature_coeffs[n] for n in names])
    phi, mean, sd = config.ar_coef, 0.5, 0.2
    x = np.empty((C, T, len(names)))
    if names:
        x[:, 0] = mean + sd * rng.standard_normal((C, len(names)))
        innov = sd * np.sqrt(1.0 - phi**2)
        for t in range(1, T):
            x[:, t] = mean + phi * (x[:, t - 1] - mean) + innov * rng.standard_normal((C, len(names)))

    cases = base[:, None] + seasonal + x @ coeffs if names else base[:, None] + seasonal
    cases = cases + config.noise_std * rng.standard_normal((C, T))
    deaths = config.death_rate * cases + config.death_rate * config.noise_std * rng.standard_normal((C, T))

    return FeaturePanel(
        county_ids=ids,
        dates=dates,
        dynamic=x,
        static=static,
        targets=np.stack([cases, deaths], axis=2),
        known=derive_known_future(dates, ids),
        dynamic_names=names,
        static_names=list(config.static_features),
        target_names=["cases", "deaths"],
    )
