"""Charted/output events -> per-episode time-binned EHR matrices."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .ingest import TIME_FORMAT, ConfigError, Episode

IMPUTE_STRATEGIES = ("zero", "mean", "previous", "next")
EVENT_COLUMNS = ["stay_id", "chart_time", "variable_label", "value", "unit"]


@dataclass(frozen=True)
class Conversion:
    scale: float = 1.0
    fahrenheit: bool = False

    def __call__(self, value: float) -> float:
        if self.fahrenheit:
            return (value - 32.0) * 5.0 / 9.0
        return value * self.scale


@dataclass(frozen=True)
class FeatureSpec:
    index: int
    name: str
    kind: str
    labels: dict = field(default_factory=dict)  # label -> Conversion
    valid_range: tuple[float, float] = (-math.inf, math.inf)
    aggregator: str = "mean"
    source: str | None = None
    unit: str = ""


@dataclass
class FeatureMap:
    specs: list[FeatureSpec]

    def __post_init__(self):
        self._by_label: dict[str, int] = {}
        for spec in self.specs:
            for label in spec.labels:
                if label in self._by_label:
                    raise ConfigError(f"event label {label!r} mapped to two features")
                self._by_label[label] = spec.index

    @property
    def n_features(self) -> int:
        return len(self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def map_event(self, variable_label: str) -> int | None:
        return self._by_label.get(variable_label)

    def timeseries_indices(self) -> list[int]:
        return [s.index for s in self.specs if s.kind == "timeseries"]


def _parse_conversion(raw: dict) -> Conversion:
    if raw.get("convert") == "fahrenheit":
        return Conversion(fahrenheit=True)
    if "convert" in raw:
        raise ConfigError(f"unknown conversion {raw['convert']!r}")
    return Conversion(scale=float(raw.get("scale", 1.0)))


def load_feature_map(path=None) -> FeatureMap:
    """Parse a feature-map TOML file (defaults to the bundled ``features.toml``)."""
    if path is None:
        text = resources.files(__package__).joinpath("features.toml").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    data = tomllib.loads(text)
    specs = []
    for i, f in enumerate(data.get("feature", [])):
        kind = f.get("kind")
        if kind not in ("static", "timeseries"):
            raise ConfigError(f"feature {f.get('name')!r}: kind must be static or timeseries")
        agg = f.get("aggregator", "mean")
        if agg not in ("mean", "sum"):
            raise ConfigError(f"feature {f['name']!r}: unknown aggregator {agg!r}")
        lo, hi = f.get("valid_range", [-math.inf, math.inf])
        specs.append(
            FeatureSpec(
                index=i,
                name=f["name"],
                kind=kind,
                labels={k: _parse_conversion(v) for k, v in f.get("labels", {}).items()},
                valid_range=(float(lo), float(hi)),
                aggregator=agg,
                source=f.get("source"),
                unit=f.get("unit", ""),
            )
        )
    return FeatureMap(specs)


class CleaningReport(Counter):
    """Mergeable event counters (``report_a + report_b`` or ``update``)."""


def clean_event(value, label: str, spec: FeatureSpec, report: CleaningReport | None = None):
    """Convert one raw event value into its canonical unit.

    Returns ``None`` for non-numeric or out-of-range values.
    """
    try:
        v = float(value)
    except (TypeError, ValueError):
        if report is not None:
            report["non_numeric"] += 1
        return None
    if not math.isfinite(v):
        if report is not None:
            report["non_numeric"] += 1
        return None
    v = spec.labels[label](v)
    lo, hi = spec.valid_range
    if not lo <= v <= hi:
        if report is not None:
            report["out_of_range"] += 1
        return None
    return v


@dataclass
class EhrMatrix:
    values: np.ndarray  # (n_bins, n_features) float64
    presence: np.ndarray  # (n_features,) int8


def read_events(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing input table: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in EVENT_COLUMNS if c not in df.columns]
    if missing:
        raise ConfigError(f"{path.name}: missing columns {missing}")
    return df[EVENT_COLUMNS]


def clean_events(events: pd.DataFrame, fmap: FeatureMap, report: CleaningReport) -> pd.DataFrame:
    """Vectorised ``map_event`` + ``clean_event`` over an event table.

    Returns columns (stay_id, chart_time, feature, value) for kept events.
    """
    feat = events["variable_label"].map(fmap._by_label)
    report["unmapped"] += int(feat.isna().sum())
    ev = events[feat.notna()].assign(feature=feat[feat.notna()].astype("int64"))

    val = pd.to_numeric(ev["value"], errors="coerce")
    bad = val.isna() | ~np.isfinite(val)
    report["non_numeric"] += int(bad.sum())
    ev = ev.assign(value=val)[~bad]

    t = pd.to_datetime(ev["chart_time"], format=TIME_FORMAT, errors="coerce")
    report["bad_time"] += int(t.isna().sum())
    sid = pd.to_numeric(ev["stay_id"], errors="coerce")
    report["bad_stay"] += int((sid.isna() & t.notna()).sum())
    ok = t.notna() & sid.notna()
    ev = ev.assign(chart_time=t, stay_id=sid)[ok]
    ev["stay_id"] = ev["stay_id"].astype("int64")

    out = np.empty(len(ev), dtype=np.float64)
    values = ev["value"].to_numpy(dtype=np.float64)
    labels = ev["variable_label"].to_numpy()
    keep = np.zeros(len(ev), dtype=bool)
    for spec in fmap.specs:
        for label, conv in spec.labels.items():
            sel = labels == label
            if not sel.any():
                continue
            v = conv(values[sel])
            lo, hi = spec.valid_range
            inr = (v >= lo) & (v <= hi)
            report["out_of_range"] += int((~inr).sum())
            out[sel] = v
            keep[sel] = inr
    ev = ev.assign(value=out)[keep]
    report["kept"] += len(ev)
    return ev[["stay_id", "chart_time", "feature", "value"]].reset_index(drop=True)


def n_bins(rate_min: int, duration_h: int) -> int:
    if (duration_h * 60) % rate_min:
        raise ConfigError(f"duration {duration_h} h is not a whole number of {rate_min}-minute bins")
    return duration_h * 60 // rate_min


def _impute(col: np.ndarray, observed: np.ndarray, strategy: str) -> np.ndarray:
    if strategy == "zero" or not observed.any():
        return np.where(observed, col, 0.0)
    if strategy == "mean":
        return np.where(observed, col, col[observed].mean())
    idx = np.arange(len(col))
    if strategy == "previous":
        last = np.maximum.accumulate(np.where(observed, idx, -1))
        return np.where(last >= 0, col[np.maximum(last, 0)], 0.0)
    if strategy == "next":
        nxt = np.minimum.accumulate(np.where(observed, idx, len(col))[::-1])[::-1]
        return np.where(nxt < len(col), col[np.minimum(nxt, len(col) - 1)], 0.0)
    raise ConfigError(f"unknown imputation strategy {strategy!r}")


def assemble_ehr_matrix(
    events: pd.DataFrame,
    episode: Episode,
    fmap: FeatureMap,
    rate_min: int = 30,
    duration_h: int = 48,
    impute: str = "zero",
) -> EhrMatrix | None:
    """Bin one episode's cleaned events into an (n_bins, n_features) matrix.

    ``events`` holds (chart_time, feature, value) rows of this episode's stay.
    Returns ``None`` when no time-series event falls inside the window, in
    which case the episode is discarded.
    """
    if impute not in IMPUTE_STRATEGIES:
        raise ConfigError(f"unknown imputation strategy {impute!r}")
    rows = n_bins(rate_min, duration_h)
    offset = (events["chart_time"] - episode.icu_in_time).dt.total_seconds().to_numpy()
    bins = np.floor(offset / (rate_min * 60.0))
    inside = (offset >= 0) & (bins < rows)
    ev = pd.DataFrame(
        {
            "feature": events["feature"].to_numpy()[inside],
            "bin": bins[inside].astype("int64"),
            "value": events["value"].to_numpy(dtype=np.float64)[inside],
        }
    )
    ts = fmap.timeseries_indices()
    ev = ev[ev["feature"].isin(ts)]
    if ev.empty:
        return None

    # Sorting values inside each group makes the reduction order-independent.
    ev = ev.sort_values(["feature", "bin", "value"], kind="mergesort")
    values = np.zeros((rows, fmap.n_features), dtype=np.float64)
    observed = np.zeros((rows, fmap.n_features), dtype=bool)
    presence = np.zeros(fmap.n_features, dtype=np.int8)
    for spec in fmap.specs:
        if spec.kind == "static":
            values[:, spec.index] = float(getattr(episode, spec.source))
            presence[spec.index] = 1
            continue
        sub = ev[ev["feature"] == spec.index]
        if sub.empty:
            continue
        g = sub.groupby("bin", sort=True)["value"]
        agg = g.sum() if spec.aggregator == "sum" else g.mean()
        values[agg.index.to_numpy(), spec.index] = agg.to_numpy()
        observed[agg.index.to_numpy(), spec.index] = True
        presence[spec.index] = 1
        values[:, spec.index] = _impute(values[:, spec.index], observed[:, spec.index], impute)
    return EhrMatrix(values=values, presence=presence)


def build_ehr_matrices(
    raw_dir,
    episodes: list[Episode],
    fmap: FeatureMap,
    rate_min: int = 30,
    duration_h: int = 48,
    impute: str = "zero",
) -> tuple[dict[str, EhrMatrix], CleaningReport]:
    """Read ``chartevents.csv`` + ``outputevents.csv`` and assemble every episode.

    Episodes absent from the returned dict had no usable events.
    """
    raw_dir = Path(raw_dir)
    report = CleaningReport()
    frames = [
        clean_events(read_events(raw_dir / name), fmap, report)
        for name in ("chartevents.csv", "outputevents.csv")
    ]
    ev = pd.concat(frames, ignore_index=True)
    wanted = {e.stay_id for e in episodes}
    ev = ev[ev["stay_id"].isin(wanted)]
    by_stay = {sid: g for sid, g in ev.groupby("stay_id", sort=False)}
    empty = ev.iloc[:0]
    out: dict[str, EhrMatrix] = {}
    for ep in episodes:
        m = assemble_ehr_matrix(by_stay.get(ep.stay_id, empty), ep, fmap, rate_min, duration_h, impute)
        if m is None:
            report["episodes_without_events"] += 1
        else:
            out[ep.key] = m
    return out, report
