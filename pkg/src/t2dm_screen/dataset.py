"""Join the modality pipelines into labelled, partitioned, standardised datasets.

On disk a dataset is a directory holding ``manifest.json``, one
little-endian float32 row-major blob per (split, tensor) and the stage-1
CXR rasters under ``images/`` (one PNG per patient, shared by all of that
patient's episodes).
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import cxr, ecg
from .ehr import FeatureMap, build_ehr_matrices, load_feature_map, n_bins
from .ingest import DEFAULT_ICU_UNITS, ConfigError, DataError, Episode, extract_episodes, load_raw_cohort

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
VARIANTS = ("ecg", "no-ecg")


class IntegrityError(Exception):
    """A persisted dataset does not match its manifest."""


@dataclass
class BuildConfig:
    variant: str = "ecg"
    rate_min: int = 30
    duration_h: int = 48
    impute: str = "zero"
    seed: int = 0
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_by_patient: bool = False
    label_scope: str = "patient"
    sigma_ddof: int = 0
    # False builds E+C without requiring an ECG (the independent pipeline)
    require_ecg: bool = True
    icu_units: tuple[str, ...] = DEFAULT_ICU_UNITS
    feature_map: str | None = None
    filter_order: int = 5
    filter_order_kind: str = "prototype"
    zero_phase: bool = False
    cxr_short_side: int = cxr.STAGE1_SHORT_SIDE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "ecg" and not self.require_ecg:
            raise ConfigError("the ecg variant always requires an ECG")
        self.ratios = tuple(float(r) for r in self.ratios)
        self.icu_units = tuple(self.icu_units)

    @property
    def with_ecg(self) -> bool:
        return self.variant == "ecg"


@dataclass
class Sample:
    sample_id: str
    patient_id: int
    y: int
    E: np.ndarray
    ehr_mask: np.ndarray
    image_key: str
    G: np.ndarray | None = None
    ecg_mask: np.ndarray | None = None
    standardized: bool = False


@dataclass
class StandardizationStats:
    e_mean: np.ndarray
    e_std: np.ndarray
    g_mean: np.ndarray | None = None
    g_std: np.ndarray | None = None
    ddof: int = 0

    def to_dict(self) -> dict:
        conv = lambda a: None if a is None else [float(x) for x in a]
        return {
            "e_mean": conv(self.e_mean), "e_std": conv(self.e_std),
            "g_mean": conv(self.g_mean), "g_std": conv(self.g_std), "ddof": self.ddof,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        conv = lambda a: None if a is None else np.asarray(a, dtype=np.float64)
        return cls(conv(d["e_mean"]), conv(d["e_std"]), conv(d["g_mean"]), conv(d["g_std"]), d.get("ddof", 0))


@dataclass
class Dataset:
    variant: str
    splits: dict[str, list[Sample]]
    images: dict[str, np.ndarray]
    stats: StandardizationStats | None
    config: dict = field(default_factory=dict)
    feature_names: list[str] = field(default_factory=list)

    @property
    def with_ecg(self) -> bool:
        return self.variant == "ecg"

    def ids(self, split: str | None = None) -> list[str]:
        names = SPLITS if split is None else (split,)
        return [s.sample_id for n in names for s in self.splits[n]]


@dataclass
class BuildReport:
    counts: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, list[str]] = field(default_factory=lambda: defaultdict(list))
    row_errors: list[str] = field(default_factory=list)
    cleaning: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "excluded": {k: sorted(v) for k, v in sorted(self.excluded.items())},
            "row_errors": self.row_errors,
            "cleaning": dict(sorted(self.cleaning.items())),
        }


# --- partition & standardisation -------------------------------------------

def split_counts(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    """floor(r * n) for train and val; the remainder goes to test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = math.floor(round(ratios[0] * n, 9))
    n_val = math.floor(round(ratios[1] * n, 9))
    return n_train, n_val, n - n_train - n_val


def partition(ids: list, ratios=(0.7, 0.1, 0.2), seed: int = 0, groups: list | None = None) -> dict[str, list]:
    """Seeded shuffle then contiguous cut into train/val/test.

    With ``groups`` (e.g. patient ids) whole groups are kept together and the
    ratios apply to the number of groups.
    """
    if len(ids) < 3:
        raise DataError(f"need at least 3 episodes to partition, got {len(ids)}")
    rng = np.random.default_rng(seed)
    if groups is None:
        perm = rng.permutation(len(ids))
        a, b, _ = split_counts(len(ids), ratios)
        order = [ids[i] for i in perm]
        return {"train": order[:a], "val": order[a : a + b], "test": order[a + b :]}
    uniq = sorted(set(groups))
    perm = [uniq[i] for i in rng.permutation(len(uniq))]
    a, b, _ = split_counts(len(uniq), ratios)
    which = {g: ("train" if k < a else "val" if k < a + b else "test") for k, g in enumerate(perm)}
    out = {"train": [], "val": [], "test": []}
    rank = {g: k for k, g in enumerate(perm)}
    for i in sorted(range(len(ids)), key=lambda i: (rank[groups[i]], i)):
        out[which[groups[i]]].append(ids[i])
    return out


def _column_stats(mats: list[np.ndarray], ddof: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([m.astype(np.float64) for m in mats], axis=0)
    mu = x.mean(axis=0)
    sd = x.std(axis=0, ddof=ddof)
    sd[sd == 0] = 1.0
    return mu, sd


def fit_standardizer(train: list[Sample], ddof: int = 0) -> StandardizationStats:
    """Per-column mean/std over every row of every training matrix."""
    if not train:
        raise DataError("cannot fit standardisation on an empty train split")
    e_mu, e_sd = _column_stats([s.E for s in train], ddof)
    g_mu = g_sd = None
    if train[0].G is not None:
        g_mu, g_sd = _column_stats([s.G for s in train], ddof)
    return StandardizationStats(e_mu, e_sd, g_mu, g_sd, ddof)


def apply_standardizer(sample: Sample, stats: StandardizationStats) -> Sample:
    if sample.standardized:
        raise ValueError(f"sample {sample.sample_id} is already standardised")
    E = ((sample.E.astype(np.float64) - stats.e_mean) / stats.e_std).astype(np.float32)
    G = None
    if sample.G is not None:
        G = ((sample.G.astype(np.float64) - stats.g_mean) / stats.g_std).astype(np.float32)
    return replace(sample, E=E, G=G, standardized=True)


# --- build ------------------------------------------------------------------

def _by_patient(items, attr="patient_id"):
    out = defaultdict(list)
    for it in items:
        out[getattr(it, attr)].append(it)
    return out


def build_dataset(raw_dir, cfg: BuildConfig = BuildConfig(), fmap: FeatureMap | None = None) -> tuple[Dataset, BuildReport]:
    raw_dir = Path(raw_dir)
    report = BuildReport()
    fmap = fmap or load_feature_map(cfg.feature_map)
    n_bins(cfg.rate_min, cfg.duration_h)

    cohort = load_raw_cohort(raw_dir)
    report.row_errors = [str(e) for e in cohort.errors]
    episodes = extract_episodes(cohort, cfg.icu_units, cfg.label_scope)
    report.counts["episodes"] = len(episodes)

    ehr, cleaning = build_ehr_matrices(raw_dir, episodes, fmap, cfg.rate_min, cfg.duration_h, cfg.impute)
    report.cleaning = dict(cleaning)
    for ep in episodes:
        if ep.key not in ehr:
            report.excluded["no_events"].append(ep.key)
    episodes = [ep for ep in episodes if ep.key in ehr]
    report.counts["with_events"] = len(episodes)

    metas = _by_patient(cxr.read_cxr_metadata(raw_dir / "cxr_metadata.csv"))
    need_ecg = cfg.require_ecg
    records = _by_patient(ecg.read_ecg_records(raw_dir / "ecg_records.csv")) if need_ecg else {}
    coeffs = ecg.design_butterworth(cfg.filter_order, order_kind=cfg.filter_order_kind) if need_ecg else None

    images: dict[str, np.ndarray] = {}
    ecg_mats: dict[int, np.ndarray] = {}
    kept: list[Episode] = []
    for pid, eps in _by_patient(episodes).items():
        meta = cxr.select_cxr(eps, metas.get(pid, []))
        if meta is None:
            report.excluded["no_cxr"].extend(e.key for e in eps)
            continue
        try:
            raster = cxr.preprocess_stage1(cxr.load_raster(raw_dir / meta.path), cfg.cxr_short_side)
        except DataError:
            report.excluded["cxr_decode_error"].extend(e.key for e in eps)
            continue
        if need_ecg:
            recs = list(records.get(pid, []))
            mat = None
            while mat is None:
                rec = ecg.select_ecg(eps, recs)
                if rec is None:
                    break
                try:
                    mat = ecg.process_ecg(ecg.read_waveform(raw_dir / rec.path), coeffs, cfg.zero_phase)
                except (DataError, OSError):
                    report.excluded["ecg_record_error"].append(rec.path)
                    recs.remove(rec)
            if mat is None:
                report.excluded["no_ecg"].extend(e.key for e in eps)
                continue
            ecg_mats[pid] = mat
        images[str(pid)] = raster
        kept.extend(eps)
    kept.sort(key=lambda e: (e.patient_id, e.admit_time, e.admission_id))
    report.counts["samples"] = len(kept)

    samples = {}
    for ep in kept:
        m = ehr[ep.key]
        s = Sample(
            sample_id=ep.key,
            patient_id=ep.patient_id,
            y=ep.label,
            E=m.values,
            ehr_mask=np.concatenate([[1], m.presence]).astype(np.int8),
            image_key=str(ep.patient_id),
        )
        if cfg.with_ecg:
            s.G = ecg_mats[ep.patient_id]
            s.ecg_mask = np.ones(ecg.N_LEADS + 1, dtype=np.int8)
        samples[ep.key] = s

    ids = [ep.key for ep in kept]
    groups = [ep.patient_id for ep in kept] if cfg.split_by_patient else None
    parts = partition(ids, cfg.ratios, cfg.seed, groups)
    split_samples = {k: [samples[i] for i in v] for k, v in parts.items()}
    stats = fit_standardizer(split_samples["train"], cfg.sigma_ddof)
    split_samples = {k: [apply_standardizer(s, stats) for s in v] for k, v in split_samples.items()}
    for k, v in split_samples.items():
        report.counts[k] = len(v)

    ds = Dataset(
        variant=cfg.variant,
        splits=split_samples,
        images={k: images[k] for k in sorted(images)},
        stats=stats,
        config=_config_dict(cfg),
        feature_names=fmap.names,
    )
    return ds, report


def _config_dict(cfg: BuildConfig) -> dict:
    d = asdict(cfg)
    d["ratios"] = list(cfg.ratios)
    d["icu_units"] = list(cfg.icu_units)
    return d


# --- persistence ------------------------------------------------------------

def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG", optimize=False, compress_level=1)
    return buf.getvalue()


def _write_blob(path: Path, arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path.write_bytes(data)
    return {"file": path.name, "shape": list(arr.shape), "dtype": "<f4", "nbytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest()}


def persist_dataset(ds: Dataset, out_dir, report: BuildReport | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "variant": ds.variant,
        "config": ds.config,
        "feature_names": ds.feature_names,
        "stats": ds.stats.to_dict() if ds.stats else None,
        "splits": {},
        "images": {},
    }
    for key, arr in ds.images.items():
        data = _png_bytes(arr)
        fname = f"images/{key}.png"
        (out / fname).write_bytes(data)
        manifest["images"][key] = {"file": fname, "shape": list(arr.shape), "sha256": hashlib.sha256(data).hexdigest()}
    for split in SPLITS:
        ss = ds.splits[split]
        tensors = {
            "E": np.stack([s.E for s in ss]) if ss else np.zeros((0, 0, 0)),
            "ehr_mask": np.stack([s.ehr_mask for s in ss]) if ss else np.zeros((0, 0)),
            "y": np.array([s.y for s in ss], dtype=np.float32),
        }
        if ds.with_ecg:
            tensors["G"] = np.stack([s.G for s in ss]) if ss else np.zeros((0, 0, 0))
            tensors["ecg_mask"] = np.stack([s.ecg_mask for s in ss]) if ss else np.zeros((0, 0))
        blobs = {name: _write_blob(out / f"{split}_{name}.f32", arr) for name, arr in tensors.items()}
        strides = {name: int(np.prod(arr.shape[1:])) * 4 for name, arr in tensors.items()}
        manifest["splits"][split] = {
            "n": len(ss),
            "blobs": blobs,
            "samples": [
                {"id": s.sample_id, "patient_id": s.patient_id, "label": s.y, "image": s.image_key,
                 "offsets": {name: i * strides[name] for name in tensors}}
                for i, s in enumerate(ss)
            ],
        }
    if report is not None:
        (out / "build_report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def _read_blob(root: Path, info: dict) -> np.ndarray:
    path = root / info["file"]
    data = path.read_bytes()
    if len(data) != info["nbytes"]:
        raise IntegrityError(f"{path.name}: expected {info['nbytes']} bytes, found {len(data)}")
    if hashlib.sha256(data).hexdigest() != info["sha256"]:
        raise IntegrityError(f"{path.name}: checksum mismatch")
    return np.frombuffer(data, dtype="<f4").reshape(info["shape"]).astype(np.float32)


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported dataset format version {manifest.get('format_version')!r}")
    images = {}
    for key, info in manifest["images"].items():
        data = (root / info["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != info["sha256"]:
            raise IntegrityError(f"{info['file']}: checksum mismatch")
        with Image.open(io.BytesIO(data)) as im:
            images[key] = np.asarray(im, dtype=np.uint8)
        if list(images[key].shape) != info["shape"]:
            raise IntegrityError(f"{info['file']}: shape mismatch")
    splits = {}
    with_ecg = manifest["variant"] == "ecg"
    for split in SPLITS:
        m = manifest["splits"][split]
        arrs = {name: _read_blob(root, info) for name, info in m["blobs"].items()}
        ss = []
        for i, rec in enumerate(m["samples"]):
            ss.append(
                Sample(
                    sample_id=rec["id"],
                    patient_id=rec["patient_id"],
                    y=int(rec["label"]),
                    E=arrs["E"][i],
                    ehr_mask=arrs["ehr_mask"][i].astype(np.int8),
                    image_key=rec["image"],
                    G=arrs["G"][i] if with_ecg else None,
                    ecg_mask=arrs["ecg_mask"][i].astype(np.int8) if with_ecg else None,
                    standardized=True,
                )
            )
        splits[split] = ss
    stats = StandardizationStats.from_dict(manifest["stats"]) if manifest.get("stats") else None
    return Dataset(
        variant=manifest["variant"],
        splits=splits,
        images=images,
        stats=stats,
        config=manifest["config"],
        feature_names=manifest["feature_names"],
    )


# --- model-ready tensors ----------------------------------------------------

@dataclass
class SplitTensors:
    """Stacked tensors for one split; images indexed through a shared bank."""

    ids: list[str]
    E: torch.Tensor
    y: torch.Tensor
    C_bank: torch.Tensor
    c_index: torch.Tensor
    ehr_mask: torch.Tensor
    G: torch.Tensor | None = None
    ecg_mask: torch.Tensor | None = None
    transform: cxr.PixelTransform = field(default_factory=cxr.PixelTransform)

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        out = {"E": self.E[idx], "C": self.C_bank[self.c_index[idx]], "y": self.y[idx]}
        if self.G is not None:
            out["G"] = self.G[idx]
        return out

    def images(self) -> torch.Tensor:
        """Per-sample (N, 3, s, s) image tensor."""
        return self.C_bank[self.c_index]

    def with_images(self, C: torch.Tensor) -> "SplitTensors":
        return replace(self, C_bank=C, c_index=torch.arange(len(self.ids)))

    def with_timeseries(self, E: torch.Tensor, G: torch.Tensor | None) -> "SplitTensors":
        return replace(self, E=E, G=G)


def split_tensors(ds: Dataset, split: str, tf: cxr.PixelTransform, cache: dict | None = None) -> SplitTensors:
    ss = ds.splits[split]
    keys = sorted({s.image_key for s in ss})
    pos = {k: i for i, k in enumerate(keys)}
    bank = []
    for k in keys:
        ck = (k, tf)
        if cache is not None and ck in cache:
            bank.append(cache[ck])
            continue
        arr = torch.from_numpy(cxr.preprocess_stage2(ds.images[k], tf))
        if cache is not None:
            cache[ck] = arr
        bank.append(arr)
    side = tf.side
    return SplitTensors(
        ids=[s.sample_id for s in ss],
        E=torch.from_numpy(np.stack([s.E for s in ss]).astype(np.float32)) if ss else torch.zeros(0, 0, 0),
        y=torch.tensor([s.y for s in ss], dtype=torch.float32),
        C_bank=torch.stack(bank) if bank else torch.zeros(0, 3, side, side),
        c_index=torch.tensor([pos[s.image_key] for s in ss], dtype=torch.long),
        ehr_mask=torch.from_numpy(np.stack([s.ehr_mask for s in ss]).astype(np.int64)) if ss else torch.zeros(0, 0),
        G=torch.from_numpy(np.stack([s.G for s in ss]).astype(np.float32)) if ds.with_ecg and ss else None,
        ecg_mask=torch.from_numpy(np.stack([s.ecg_mask for s in ss]).astype(np.int64)) if ds.with_ecg and ss else None,
        transform=tf,
    )
