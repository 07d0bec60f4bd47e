"""Test-time noise, missing-radiograph and no-pretraining ablations.

Time-series noise is added in standardized space. Image noise is applied in
[0, 1] pixel space (before channel normalization) and clamped. Poisson noise
is centered, so every family is the identity at amplitude 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import cxr, metrics
from .dataset import Dataset, Sample, SplitTensors, split_tensors
from .ingest import ConfigError
from .training import fit, image_transform, predict

TS_FAMILIES = ("gaussian", "poisson", "uniform")
IMAGE_FAMILIES = ("gaussian", "poisson", "salt_pepper")
# (time-series family, image family) per reported row
DEFAULT_PAIRS = (("gaussian", "gaussian"), ("poisson", "poisson"), ("uniform", "salt_pepper"))
AMPLITUDES = (0.1, 0.5, 0.7)
RATIOS = (0.3, 0.5, 0.7)
KINDS = ("noise", "missing_cxr", "no_pretrain")


@dataclass
class AblationSpec:
    kind: str = "noise"
    pairs: tuple = DEFAULT_PAIRS
    amplitudes: tuple = AMPLITUDES
    ratios: tuple = RATIOS
    seed: int = 0
    bootstrap_iters: int = 1000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown ablation kind {self.kind!r}")
        for ts, img in self.pairs:
            _check_family(ts, TS_FAMILIES)
            _check_family(img, IMAGE_FAMILIES)
        if any(a < 0 for a in self.amplitudes):
            raise ConfigError("noise amplitudes must be non-negative")
        if any(not 0 <= r <= 1 for r in self.ratios):
            raise ConfigError("missing ratios must lie in [0, 1]")


def _check_family(family: str, allowed) -> None:
    if family not in allowed:
        raise ConfigError(f"unknown noise family {family!r}; expected one of {allowed}")


def _cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --- perturbations ------------------------------------------------------------

def timeseries_noise(x: np.ndarray, family: str, a: float, rng: np.random.Generator) -> np.ndarray:
    _check_family(family, TS_FAMILIES)
    if a < 0:
        raise ValueError("amplitude must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if a == 0:
        return x.copy()
    if family == "gaussian":
        return x + a * rng.standard_normal(x.shape)
    if family == "uniform":
        return x + rng.uniform(-a, a, size=x.shape)
    return x + a * (rng.poisson(1.0, size=x.shape) - 1.0)


def image_noise(x01: np.ndarray, family: str, a: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb an image with values in [0, 1]; the result is clamped to [0, 1]."""
    _check_family(family, IMAGE_FAMILIES)
    if a < 0:
        raise ValueError("amplitude must be non-negative")
    x = np.asarray(x01, dtype=np.float64)
    if a == 0:
        return x.copy()
    if family == "salt_pepper":
        out = x.copy()
        hit = rng.random(x.shape) < a
        out[hit] = (rng.random(int(hit.sum())) < 0.5).astype(np.float64)
        return out
    if family == "gaussian":
        out = x + a * rng.standard_normal(x.shape)
    else:
        out = x + a * (rng.poisson(1.0, size=x.shape) - 1.0)
    return np.clip(out, 0.0, 1.0)


def perturb_sample(sample: Sample, family: str, amplitude: float, seed: int) -> Sample:
    """Copy of ``sample`` with noise added to its E (and G) matrices."""
    rng = np.random.default_rng(seed)
    E = timeseries_noise(sample.E, family, amplitude, rng)
    G = timeseries_noise(sample.G, family, amplitude, rng) if sample.G is not None else None
    return replace(sample, E=E, G=G)


def perturb_split(data: SplitTensors, ts_family: str, image_family: str, amplitude: float, seed: int) -> SplitTensors:
    """Noisy copy of a split: E/G in standardized space, images in pixel space."""
    rng = np.random.default_rng(seed)
    E = torch.from_numpy(timeseries_noise(data.E.numpy(), ts_family, amplitude, rng)).to(data.E.dtype)
    G = None
    if data.G is not None:
        G = torch.from_numpy(timeseries_noise(data.G.numpy(), ts_family, amplitude, rng)).to(data.G.dtype)
    tf = data.transform
    imgs = data.images().numpy()
    # grayscale replicated to 3 channels: perturb one plane, replicate again
    plane = cxr.denormalize(imgs, tf)[:, :1]
    noisy = image_noise(plane, image_family, amplitude, rng)
    C = cxr.normalize(np.repeat(noisy, 3, axis=1), tf).astype(np.float32)
    return data.with_timeseries(E, G).with_images(torch.from_numpy(C))


def n_masked(n: int, ratio: float) -> int:
    return int(np.floor(ratio * n + 0.5))


def mask_cxr_fraction(data: SplitTensors, ratio: float, seed: int) -> tuple[SplitTensors, np.ndarray]:
    """Replace the raw radiograph of round(ratio*N) samples with zeros.

    The zero image still goes through the model's pixel transform. Returns the
    new split and the sorted indices that were masked.
    """
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    n = len(data)
    k = n_masked(n, ratio)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    tf = data.transform
    blank = torch.from_numpy(cxr.preprocess_stage2(np.zeros((tf.side, tf.side), dtype=np.uint8), tf))
    C = data.images().clone()
    if k:
        C[torch.from_numpy(idx)] = blank
    return data.with_images(C), idx


# --- suite -----------------------------------------------------------------

@dataclass
class AblationCell:
    kind: str
    family: str  # "ts/img" family pair, or "" for missing-CXR cells
    level: float  # amplitude or missing ratio
    report: dict
    seed: int


@dataclass
class AblationReport:
    kind: str
    baseline: dict
    cells: list[AblationCell] = field(default_factory=list)
    average: dict | None = None

    def mean_auroc(self, level: float) -> float:
        pts = [c.report["AUROC"].point for c in self.cells if c.level == level]
        return float(np.mean(pts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "family", "amplitude", "metric", "point", "lo", "hi"])
        rows = [("baseline", "", 0.0, self.baseline)]
        rows += [(c.kind, c.family, c.level, c.report) for c in self.cells]
        if self.average is not None:
            rows.append((self.kind, "average", float("nan"), self.average))
        for kind, fam, level, rep in rows:
            for metric, m in rep.items():
                w.writerow([kind, fam, level, metric, repr(m.point), repr(m.lo), repr(m.hi)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["Condition", "Level"] + list(metrics.METRICS)
        lines = [head, ["baseline", "-"] + [metrics.format_ci(self.baseline[m]) for m in metrics.METRICS]]
        for c in self.cells:
            name = c.family or ("missing CXR" if c.kind == "missing_cxr" else c.kind)
            level = f"{c.level:.0%}" if c.kind == "missing_cxr" else f"{c.level:g}"
            lines.append([name, level] + [metrics.format_ci(c.report[m]) for m in metrics.METRICS])
        if self.average is not None:
            lines.append(["average", "-"] + [metrics.format_ci(self.average[m]) for m in metrics.METRICS])
        widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
        out = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in lines]
        out.insert(1, "-" * len(out[0]))
        return "\n".join(out) + "\n"


def _average(reports: list[dict]) -> dict:
    out = {}
    for m in metrics.METRICS:
        cis = [r[m] for r in reports]
        out[m] = metrics.MetricCI(
            point=float(np.mean([c.point for c in cis])),
            lo=float(np.mean([c.lo for c in cis])),
            hi=float(np.mean([c.hi for c in cis])),
            iterations=cis[0].iterations,
            seed=cis[0].seed,
        )
    return out


def _report(model, data: SplitTensors, spec: AblationSpec) -> dict:
    scores = predict(model, data)
    return metrics.evaluate(scores, data.y.numpy(), spec.bootstrap_iters, spec.seed)


def run_ablation_suite(model, dataset: Dataset, spec: AblationSpec, train_cfg=None, split: str = "test") -> AblationReport:
    """Evaluate ``model`` on perturbed copies of ``split``.

    ``no_pretrain`` retrains from ``train_cfg`` with the image encoder randomly
    initialized and reports the retrained model as its single cell.
    """
    data = split_tensors(dataset, split, image_transform(model))
    baseline = _report(model, data, spec)
    rep = AblationReport(kind=spec.kind, baseline=baseline)
    if spec.kind == "noise":
        i = 0
        for ts, img in spec.pairs:
            for a in spec.amplitudes:
                seed = _cell_seed(spec.seed, i)
                noisy = perturb_split(data, ts, img, a, seed)
                rep.cells.append(AblationCell("noise", f"{ts}/{img}", float(a), _report(model, noisy, spec), seed))
                i += 1
        rep.average = _average([c.report for c in rep.cells])
    elif spec.kind == "missing_cxr":
        for i, r in enumerate(spec.ratios):
            seed = _cell_seed(spec.seed, i)
            masked, _ = mask_cxr_fraction(data, r, seed)
            rep.cells.append(AblationCell("missing_cxr", "", float(r), _report(model, masked, spec), seed))
    else:
        if train_cfg is None:
            raise ConfigError("the no_pretrain ablation needs the original training config")
        retrained, _ = fit(dataset, replace(train_cfg, pretrained=None))
        rep.cells.append(AblationCell("no_pretrain", "", 0.0, _report(retrained, data, spec), train_cfg.seed))
    return rep
