"""Chest X-ray selection and the two-stage pixel pipeline.

Stage 1 (stored in datasets): aspect-preserving resize to a 384-pixel
shorter side, single channel uint8. Stage 2 (model input): resize + centre
crop to ``side x side``, scale to [0, 1], replicate to 3 channels and apply
per-channel normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from .ingest import TIME_FORMAT, ConfigError, DataError, Episode

WINDOW = pd.Timedelta(days=30)
STAGE1_SHORT_SIDE = 384


@dataclass(frozen=True)
class CxrMeta:
    patient_id: int
    study_time: pd.Timestamp
    view_position: str
    path: str


@dataclass(frozen=True)
class PixelTransform:
    side: int = 224
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class CxrImage:
    pixels: np.ndarray
    source: str
    log: list[dict] = field(default_factory=list)


def read_cxr_metadata(path) -> list[CxrMeta]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing input table: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    t = pd.to_datetime(df["study_time"], format=TIME_FORMAT, errors="coerce")
    if t.isna().any():
        line = int(np.flatnonzero(t.isna().to_numpy())[0]) + 2
        raise DataError(f"{path.name}:{line}: unparseable study_time")
    return [
        CxrMeta(int(p), ts, v.strip().upper(), s)
        for p, ts, v, s in zip(df["patient_id"], t, df["view_position"], df["path"])
    ]


def select_cxr(episodes: list[Episode], metas: list[CxrMeta]) -> CxrMeta | None:
    """Earliest PA image within 30 days of the patient's hospital span.

    The window runs from the first admission minus 30 days to the last
    discharge plus 30 days, inclusive. Ties on study time go to the
    lexicographically smallest path.
    """
    if not episodes:
        raise ValueError("select_cxr needs at least one episode")
    lo = min(e.admit_time for e in episodes) - WINDOW
    hi = max(e.discharge_time for e in episodes) + WINDOW
    cands = [m for m in metas if m.view_position == "PA" and lo <= m.study_time <= hi]
    if not cands:
        return None
    return min(cands, key=lambda m: (m.study_time, m.path))


def load_raster(path) -> np.ndarray:
    """Decode an 8-bit raster to a 2-D uint8 luminance array."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB", "RGBA", "P", "LA"):
                raise DataError(f"{path}: unsupported image mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc


def _resize(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    im = Image.fromarray(arr, mode="L")
    return np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.uint8)


def short_side_size(h: int, w: int, short: int) -> tuple[int, int]:
    if h <= w:
        return short, max(1, round(w * short / h))
    return max(1, round(h * short / w)), short


def preprocess_stage1(arr: np.ndarray, short_side: int = STAGE1_SHORT_SIDE) -> np.ndarray:
    h, w = arr.shape
    nh, nw = short_side_size(h, w, short_side)
    if (nh, nw) == (h, w):
        return arr.copy()
    return _resize(arr, nw, nh)


def preprocess_stage2(arr: np.ndarray, tf: PixelTransform) -> np.ndarray:
    """uint8 (h, w) -> float32 (3, side, side), normalised."""
    x = to_unit_range(arr, tf.side)
    return normalize(x, tf)


def to_unit_range(arr: np.ndarray, side: int) -> np.ndarray:
    """Resize/centre-crop to ``side`` and scale to [0, 1]; returns (3, side, side)."""
    h, w = arr.shape
    nh, nw = short_side_size(h, w, side)
    img = arr if (nh, nw) == (h, w) else _resize(arr, nw, nh)
    top = (nh - side) // 2
    left = (nw - side) // 2
    img = img[top : top + side, left : left + side]
    x = img.astype(np.float32) / np.float32(255.0)
    return np.repeat(x[None], 3, axis=0)


def normalize(x: np.ndarray, tf: PixelTransform) -> np.ndarray:
    mean = np.asarray(tf.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(tf.std, dtype=np.float32)[:, None, None]
    return ((x - mean) / std).astype(np.float32)


def denormalize(x: np.ndarray, tf: PixelTransform) -> np.ndarray:
    mean = np.asarray(tf.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(tf.std, dtype=np.float32)[:, None, None]
    return (x * std + mean).astype(np.float32)


def preprocess_cxr(path, tf: PixelTransform, short_side: int = STAGE1_SHORT_SIDE) -> CxrImage:
    """Decode, stage-1 resize and stage-2 transform one image, logging each step."""
    raw = load_raster(path)
    log = [{"op": "decode", "shape": list(raw.shape)}]
    s1 = preprocess_stage1(raw, short_side)
    log.append({"op": "resize_short_side", "short_side": short_side, "shape": list(s1.shape)})
    px = preprocess_stage2(s1, tf)
    log.append({"op": "resize_center_crop", "side": tf.side})
    log.append({"op": "scale", "divisor": 255.0})
    log.append({"op": "replicate_channels", "channels": 3})
    log.append({"op": "normalize", "mean": list(tf.mean), "std": list(tf.std)})
    return CxrImage(pixels=px, source=str(path), log=log)
