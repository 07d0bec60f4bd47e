"""12-lead ECG selection, Butterworth band-pass filtering and row reduction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal

from .ingest import TIME_FORMAT, ConfigError, DataError, Episode

N_LEADS = 12
N_SAMPLES = 5000
FS_HZ = 500.0
REDUCE_BLOCK = 50


@dataclass
class FilterCoeffs:
    """Second-order sections, rows ``[b0, b1, b2, 1, a1, a2]``."""

    sos: np.ndarray
    order: int
    lo_hz: float
    hi_hz: float
    fs_hz: float

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(s[3:]) for s in self.sos])


@dataclass
class EcgRecord:
    patient_id: int
    record_time: pd.Timestamp
    path: str
    missing: tuple[bool, ...]
    samples: np.ndarray | None = None

    @property
    def has_missing(self) -> bool:
        return any(self.missing)


def _prototype_poles(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * math.pi * (2 * k + order - 1) / (2 * order))


def design_butterworth(
    order: int = 5,
    lo_hz: float = 0.5,
    hi_hz: float = 150.0,
    fs_hz: float = FS_HZ,
    order_kind: str = "prototype",
) -> FilterCoeffs:
    """Digital Butterworth band-pass via a pre-warped bilinear transform.

    ``order`` is the low-pass prototype order by default, so the realised
    band-pass has order ``2 * order``. With ``order_kind="realized"`` the
    prototype order is ``ceil(order / 2)``.
    """
    if not 0 < lo_hz < hi_hz < fs_hz / 2:
        raise ConfigError(f"invalid band: need 0 < {lo_hz} < {hi_hz} < {fs_hz / 2}")
    if order < 1:
        raise ConfigError("filter order must be >= 1")
    if order_kind == "realized":
        n = math.ceil(order / 2)
    elif order_kind == "prototype":
        n = order
    else:
        raise ConfigError(f"unknown order_kind {order_kind!r}")

    fs2 = 2.0 * fs_hz
    w_lo = fs2 * math.tan(math.pi * lo_hz / fs_hz)
    w_hi = fs2 * math.tan(math.pi * hi_hz / fs_hz)
    bw = w_hi - w_lo
    w0 = math.sqrt(w_lo * w_hi)

    # low-pass prototype -> analog band-pass: each pole splits into two
    p = _prototype_poles(n)
    half = p * bw / 2.0
    disc = np.sqrt(half**2 - w0**2 + 0j)
    s_poles = np.concatenate([half + disc, half - disc])
    # n zeros at s = 0, n at infinity; analog gain bw**n

    z_poles = (fs2 + s_poles) / (fs2 - s_poles)
    gain = bw**n * np.real(fs2**n / np.prod(fs2 - s_poles))

    sections = []
    for a in _pair_poles(z_poles):
        sections.append([1.0, 0.0, -1.0, 1.0, a[0], a[1]])
    sos = np.array(sections, dtype=np.float64)
    sos[0, :3] *= gain
    return FilterCoeffs(sos=sos, order=n, lo_hz=lo_hz, hi_hz=hi_hz, fs_hz=fs_hz)


def _pair_poles(poles: np.ndarray, tol: float = 1e-10) -> list[tuple[float, float]]:
    """Group poles into real quadratics ``z^2 + a1 z + a2``."""
    upper = [q for q in poles if q.imag > tol]
    real = sorted(float(q.real) for q in poles if abs(q.imag) <= tol)
    out = [(-2.0 * q.real, abs(q) ** 2) for q in upper]
    if len(real) % 2:
        raise ValueError("odd number of real poles")
    for r1, r2 in zip(real[0::2], real[1::2]):
        out.append((-(r1 + r2), r1 * r2))
    return out


def frequency_response(coeffs: FilterCoeffs, freqs_hz) -> np.ndarray:
    """Complex H(e^{jw}) of the section cascade at the given frequencies."""
    w = 2 * math.pi * np.asarray(freqs_hz, dtype=np.float64) / coeffs.fs_hz
    zi = np.exp(-1j * w)
    h = np.ones_like(zi)
    for b0, b1, b2, _, a1, a2 in coeffs.sos:
        h *= (b0 + b1 * zi + b2 * zi**2) / (1 + a1 * zi + a2 * zi**2)
    return h


def apply_bandpass(samples: np.ndarray, coeffs: FilterCoeffs, zero_phase: bool = False) -> np.ndarray:
    """Filter each lead (column) independently, zero initial state."""
    x = np.asarray(samples, dtype=np.float64)
    y = signal.sosfiltfilt(coeffs.sos, x, axis=0) if zero_phase else signal.sosfilt(coeffs.sos, x, axis=0)
    if not np.all(np.isfinite(y)):
        raise DataError("non-finite filter output")
    return y


def reduce_ecg(filtered: np.ndarray, block: int = REDUCE_BLOCK) -> np.ndarray:
    """Average consecutive blocks of ``block`` rows (5000x12 -> 100x12)."""
    rows = filtered.shape[0]
    if filtered.ndim != 2 or rows % block:
        raise DataError(f"cannot reduce shape {filtered.shape} in blocks of {block}")
    # reduce each lead as its own contiguous row so the result does not
    # depend on column order or memory layout
    leads = np.ascontiguousarray(np.asarray(filtered, dtype=np.float64).T)
    return leads.reshape(leads.shape[0], rows // block, block).mean(axis=-1).T.copy()


def parse_missing_flags(raw: str) -> tuple[bool, ...]:
    s = raw.strip()
    if len(s) != N_LEADS or set(s) - {"0", "1"}:
        raise DataError(f"missing_flags must be {N_LEADS} characters of 0/1, got {raw!r}")
    return tuple(c == "1" for c in s)


def read_ecg_records(path) -> list[EcgRecord]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing input table: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    t = pd.to_datetime(df["record_time"], format=TIME_FORMAT, errors="coerce")
    out = []
    for i, (p, ts, fp, flags) in enumerate(zip(df["patient_id"], t, df["path"], df["missing_flags"])):
        if pd.isna(ts):
            raise DataError(f"{path.name}:{i + 2}: unparseable record_time")
        out.append(EcgRecord(int(p), ts, fp, parse_missing_flags(flags)))
    return out


def read_waveform(path) -> np.ndarray:
    """Load a little-endian float32, row-major 5000x12 waveform."""
    data = np.fromfile(path, dtype="<f4")
    if data.size != N_SAMPLES * N_LEADS:
        raise DataError(f"{path}: expected {N_SAMPLES * N_LEADS} floats, found {data.size}")
    return data.reshape(N_SAMPLES, N_LEADS)


def write_waveform(path, samples: np.ndarray) -> None:
    np.ascontiguousarray(samples, dtype="<f4").tofile(path)


def select_ecg(episodes: list[Episode], records: list[EcgRecord]) -> EcgRecord | None:
    """First complete record between first admission and last discharge (inclusive)."""
    if not episodes:
        raise ValueError("select_ecg needs at least one episode")
    lo = min(e.admit_time for e in episodes)
    hi = max(e.discharge_time for e in episodes)
    cands = [r for r in records if not r.has_missing and lo <= r.record_time <= hi]
    if not cands:
        return None
    return min(cands, key=lambda r: (r.record_time, r.path))


def process_ecg(samples: np.ndarray, coeffs: FilterCoeffs, zero_phase: bool = False) -> np.ndarray:
    if samples.shape != (N_SAMPLES, N_LEADS):
        raise DataError(f"ECG must be {N_SAMPLES}x{N_LEADS}, got {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise DataError("ECG contains missing samples")
    return reduce_ecg(apply_bandpass(samples, coeffs, zero_phase))
