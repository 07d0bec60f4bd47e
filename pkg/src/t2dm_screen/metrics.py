"""AUROC, average precision, accuracy and percentile-bootstrap CIs."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """Metric is undefined for the given labels (e.g. only one class)."""


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if s.size == 0:
        raise UndefinedMetric("empty input")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ == s-)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over thresholds of precision * recall increment.

    Tied scores form a single threshold (step function, no interpolation).
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum((d_tp / n_pos) * (tp / predicted)))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _as_arrays(scores, labels)
    return float(np.mean((s >= threshold).astype(np.int64) == y))


METRICS: dict[str, Callable] = {"AUROC": auroc, "AUPRC": auprc, "Accuracy": accuracy}


@dataclass
class MetricCI:
    point: float
    lo: float
    hi: float
    iterations: int
    seed: int
    redraws: int = 0


def bootstrap_ci(
    metric: Callable,
    scores,
    labels,
    iters: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
    max_redraws: int = 100_000,
) -> MetricCI:
    """Percentile bootstrap over resampled indices.

    Resamples on which the metric is undefined are redrawn and counted.
    """
    s, y = _as_arrays(scores, labels)
    point = metric(s, y)
    rng = np.random.default_rng(seed)
    n = s.size
    vals = np.empty(iters, dtype=np.float64)
    redraws = 0
    i = 0
    while i < iters:
        idx = rng.integers(0, n, size=n)
        try:
            vals[i] = metric(s[idx], y[idx])
        except UndefinedMetric:
            redraws += 1
            if redraws > max_redraws:
                raise
            continue
        i += 1
    lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2])
    return MetricCI(point=float(point), lo=float(lo), hi=float(hi), iterations=iters, seed=seed, redraws=redraws)


def evaluate(scores, labels, iters: int = 1000, seed: int = 0) -> dict[str, MetricCI]:
    """Point estimate + 95% CI for every metric (the MetricsReport)."""
    return {name: bootstrap_ci(fn, scores, labels, iters, seed) for name, fn in METRICS.items()}


def report_to_dict(report: dict[str, MetricCI]) -> dict:
    return {k: asdict(v) for k, v in report.items()}


def report_from_dict(d: dict) -> dict[str, MetricCI]:
    return {k: MetricCI(**v) for k, v in d.items()}


def format_ci(m: MetricCI) -> str:
    return f"{m.point:.4f} ({m.lo:.4f}, {m.hi:.4f})"


def results_table(rows: dict[str, dict[str, dict[str, MetricCI]]]) -> str:
    """Aligned text table: model x metric rows, one column per dataset variant.

    ``rows`` maps model name -> variant name -> MetricsReport.
    """
    variants = sorted({v for per in rows.values() for v in per}, key=lambda v: (v != "E+C+G", v))
    header = ["Model", "Metric"] + [f"D_{v}" for v in variants]
    lines = [header]
    for model, per in rows.items():
        for k, metric in enumerate(METRICS):
            cells = [format_ci(per[v][metric]) if v in per else "-" for v in variants]
            lines.append([model if k == 0 else "", metric] + cells)
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    out = []
    for j, r in enumerate(lines):
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if j == 0:
            out.append("-" * len(out[0]))
    return "\n".join(out) + "\n"


def results_csv(rows: dict[str, dict[str, dict[str, MetricCI]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "variant", "metric", "point", "lo", "hi", "iterations", "seed"])
    for model, per in rows.items():
        for variant, rep in per.items():
            for metric, m in rep.items():
                w.writerow([model, variant, metric, repr(m.point), repr(m.lo), repr(m.hi), m.iterations, m.seed])
    return buf.getvalue()
