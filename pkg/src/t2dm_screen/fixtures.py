"""Synthetic MIMIC-format cohorts with planted, label-correlated signal.

Positives get a raised heart-rate baseline, a brighter central (mediastinal)
blob on the radiograph and a larger ~1 Hz component on every ECG lead.
Signal strengths are in units of the between-patient spread of the
corresponding quantity, so 0 means "no label information".

The first patients of every cohort are deterministic edge cases (see
``EDGE_KINDS``) whose pipeline outcome is written to ``expected.json``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .ecg import N_LEADS, N_SAMPLES, FS_HZ, write_waveform
from .ingest import TIME_FORMAT

EDGE_KINDS = (
    "multi_stay",
    "transfer",
    "no_icu",
    "no_events",
    "ap_only",
    "cxr_out_of_window",
    "ecg_missing_lead",
    "ecg_out_of_window",
    "cxr_choice",
    "ecg_choice",
    "family_history",
    "near_miss_codes",
    "icd9_dotted_positive",
    "late_positive",
)

ICU_UNITS = ("MICU", "SICU", "CCU", "CVICU", "TSICU")
NEG_CODES = ((9, "4019"), (10, "I10"), (9, "41401"), (10, "N179"), (10, "J189"), (9, "5849"))
POS_CODES = ((9, "25000"), (9, "25002"), (10, "E119"), (10, "E1165"), (9, "25040"))

HR_MEAN, HR_SPREAD, HR_NOISE = 80.0, 8.0, 4.0
BLOB_MEAN, BLOB_SPREAD = 0.55, 0.05
LF_MEAN, LF_SPREAD, LF_HZ = 0.20, 0.08, 1.0


@dataclass
class FixtureConfig:
    n_patients: int = 20
    prevalence: float = 0.31
    ehr_signal: float = 2.0
    cxr_signal: float = 2.0
    ecg_signal: float = 2.0
    # extra, randomly placed missing-modality patients (beyond the edge cases)
    ap_only_rate: float = 0.03
    ecg_missing_rate: float = 0.03
    image_shape: tuple[int, int] = (320, 288)
    edge_cases: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.prevalence < 1:
            raise ValueError("prevalence must be in (0, 1)")
        self.image_shape = tuple(self.image_shape)


def _fmt(t: pd.Timestamp) -> str:
    return t.floor("s").strftime(TIME_FORMAT)


class _Writer:
    def __init__(self):
        self.rows = {k: [] for k in (
            "patients", "admissions", "icustays", "diagnoses_icd",
            "chartevents", "outputevents", "cxr_metadata", "ecg_records",
        )}


def _vitals(rng, y, cfg, stay_id, t0, t1, drop_temp, label_choice):
    """Hourly vitals with jitter from ``t0`` to ``t1`` (may start before in_time)."""
    hr_base = rng.normal(HR_MEAN, HR_SPREAD) + y * cfg.ehr_signal * HR_SPREAD
    sbp = rng.normal(120, 12)
    dbp = rng.normal(75, 8)
    rr = rng.normal(16, 2.5)
    temp = rng.normal(37.0, 0.35)
    temp_label = label_choice(["Temperature Celsius", "Temperature Fahrenheit"])
    bp_kind = label_choice(["Non Invasive Blood Pressure", "Arterial Blood Pressure"])
    rows = []
    hours = int((t1 - t0) / pd.Timedelta(hours=1))
    for h in range(hours + 1):
        t = t0 + pd.Timedelta(hours=h) + pd.Timedelta(minutes=int(rng.integers(0, 20)))
        if t > t1:
            break
        ts = _fmt(t)
        rows.append((stay_id, ts, "Heart rate", f"{hr_base + rng.normal(0, HR_NOISE):.1f}", "bpm"))
        rows.append((stay_id, ts, f"{bp_kind} systolic", f"{sbp + rng.normal(0, 6):.0f}", "mmHg"))
        rows.append((stay_id, ts, f"{bp_kind} diastolic", f"{dbp + rng.normal(0, 4):.0f}", "mmHg"))
        if rng.random() < 0.8:
            rows.append((stay_id, ts, "Respiratory Rate", f"{rr + rng.normal(0, 1.5):.0f}", "insp/min"))
        if h % 4 == 0 and not drop_temp:
            c = temp + rng.normal(0, 0.15)
            if temp_label == "Temperature Fahrenheit":
                rows.append((stay_id, ts, temp_label, f"{c * 9 / 5 + 32:.1f}", "°F"))
            else:
                rows.append((stay_id, ts, temp_label, f"{c:.1f}", "°C"))
        if rng.random() < 0.01:
            rows.append((stay_id, ts, "Heart rate", "999", "bpm"))  # outlier
        if rng.random() < 0.01:
            rows.append((stay_id, ts, "Respiratory Rate", "___", "insp/min"))  # non-numeric
    return rows


def _anthro(rng, stay_id, t, label_choice):
    ts = _fmt(t)
    height = rng.normal(170, 9)
    weight = rng.normal(80, 15)
    rows = []
    if label_choice(["cm", "in"]) == "cm":
        rows.append((stay_id, ts, "Height (cm)", f"{height:.0f}", "cm"))
    else:
        rows.append((stay_id, ts, "Height", f"{height / 2.54:.1f}", "Inch"))
    if label_choice(["kg", "lbs"]) == "kg":
        rows.append((stay_id, ts, "Admission Weight (Kg)", f"{weight:.1f}", "kg"))
    else:
        rows.append((stay_id, ts, "Admission Weight (lbs.)", f"{weight / 0.45359237:.1f}", "lb"))
    return rows


def _urine(rng, stay_id, t0, t1):
    rows = []
    hours = int((t1 - t0) / pd.Timedelta(hours=2))
    label = "Foley" if rng.random() < 0.7 else "Void"
    for h in range(hours + 1):
        t = t0 + pd.Timedelta(hours=2 * h) + pd.Timedelta(minutes=int(rng.integers(0, 30)))
        if t > t1:
            break
        rows.append((stay_id, _fmt(t), label, f"{max(0.0, rng.normal(90, 35)):.0f}", "mL"))
        if rng.random() < 0.03:
            rows.append((stay_id, _fmt(t), "GU Irrigant Volume In", f"{rng.integers(10, 60)}", "mL"))
    return rows


def _radiograph(rng, y, cfg) -> np.ndarray:
    h, w = cfg.image_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = h * (0.5 + rng.normal(0, 0.02)), w * (0.5 + rng.normal(0, 0.02))
    img = 0.25 + 0.15 * (yy / h)
    body = ((yy - cy) / (0.48 * h)) ** 2 + ((xx - cx) / (0.47 * w)) ** 2 < 1
    img = img + 0.2 * body
    for side in (-1, 1):
        lung = ((yy - cy + 0.05 * h) / (0.33 * h)) ** 2 + ((xx - cx - side * 0.22 * w) / (0.15 * w)) ** 2 < 1
        img = np.where(lung, img - 0.22, img)
    blob_level = rng.normal(BLOB_MEAN, BLOB_SPREAD) + y * cfg.cxr_signal * BLOB_SPREAD
    blob = ((yy - cy) / (0.28 * h)) ** 2 + ((xx - cx) / (0.08 * w)) ** 2 < 1
    img = np.where(blob, blob_level + 0.1 * (yy / h), img)
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _ecg_waveform(rng, y, cfg, missing_lead=None) -> np.ndarray:
    t = np.arange(N_SAMPLES) / FS_HZ
    rate = rng.uniform(55, 100) / 60.0
    beats = np.arange(rng.uniform(0, 1 / rate), t[-1], 1 / rate)
    pulse = np.zeros(N_SAMPLES)
    for b in beats:
        pulse += np.exp(-0.5 * ((t - b) / 0.012) ** 2) - 0.15 * np.exp(-0.5 * ((t - b - 0.25) / 0.04) ** 2)
    lf_amp = max(0.0, rng.normal(LF_MEAN, LF_SPREAD) + y * cfg.ecg_signal * LF_SPREAD)
    lf = lf_amp * np.sin(2 * np.pi * LF_HZ * t + rng.uniform(0, 2 * np.pi))
    gains = rng.uniform(0.4, 1.6, size=N_LEADS) * rng.choice([-1, 1], size=N_LEADS)
    x = pulse[:, None] * gains[None, :] + lf[:, None] + rng.normal(0, 0.02, size=(N_SAMPLES, N_LEADS))
    if missing_lead is not None:
        x[:, missing_lead] = np.nan
    return x.astype(np.float32)


def generate_cohort(cfg: FixtureConfig, out_dir) -> dict:
    """Write a complete raw directory plus ``expected.json``; returns the latter."""
    out = Path(out_dir)
    (out / "cxr").mkdir(parents=True, exist_ok=True)
    (out / "ecg").mkdir(parents=True, exist_ok=True)
    w = _Writer()
    expected_patients = {}
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    next_adm = [20000000]
    next_stay = [30000000]

    def new_adm():
        next_adm[0] += 1
        return next_adm[0]

    def new_stay():
        next_stay[0] += 1
        return next_stay[0]

    for i in range(cfg.n_patients):
        rng = np.random.default_rng(seeds[i])
        pid = 10000001 + i
        kind = EDGE_KINDS[i] if cfg.edge_cases and i < len(EDGE_KINDS) else "normal"
        if kind == "normal" and rng.random() < cfg.ap_only_rate:
            kind = "ap_only_random"
        elif kind == "normal" and rng.random() < cfg.ecg_missing_rate:
            kind = "ecg_missing_random"

        def choice(opts):
            return opts[int(rng.integers(0, len(opts)))]

        y = int(rng.random() < cfg.prevalence)
        if kind == "near_miss_codes":
            y = 0
        if kind in ("icd9_dotted_positive", "late_positive"):
            y = 1
        fam = int(kind == "family_history" or rng.random() < 0.01)
        sex = choice(["F", "M"])
        age = int(rng.integers(18, 92))
        w.rows["patients"].append((pid, sex, age))

        start = pd.Timestamp("2120-01-01") + pd.Timedelta(days=int(rng.integers(0, 20000)))
        n_adm = 2 if kind in ("transfer", "no_icu", "late_positive") else (2 if rng.random() < 0.25 else 1)
        if kind in ("no_events",):
            n_adm = 1
        adm_rows = []
        t = start
        for a in range(n_adm):
            admit = t + pd.Timedelta(minutes=int(rng.integers(0, 1440)))
            discharge = admit + pd.Timedelta(hours=int(rng.integers(80, 300)))
            adm_rows.append((new_adm(), admit, discharge))
            t = discharge + pd.Timedelta(days=int(rng.integers(40, 300)))

        episodes = []  # (admission_id, stay_id)
        excluded = {}
        for a, (adm_id, admit, discharge) in enumerate(adm_rows):
            w.rows["admissions"].append((pid, adm_id, _fmt(admit), _fmt(discharge)))
            if kind == "no_icu" and a == 0:
                excluded[adm_id] = "no_icu"
                continue
            in_time = admit + pd.Timedelta(hours=int(rng.integers(2, 24)), minutes=int(rng.integers(0, 60)))
            out_time = min(in_time + pd.Timedelta(hours=int(rng.integers(20, 72))), discharge - pd.Timedelta(hours=1))
            unit = choice(ICU_UNITS)
            stays = [(new_stay(), in_time, out_time, unit)]
            if kind == "transfer" and a == 0:
                stays = [(stays[0][0], in_time, out_time, f"{unit}|Medicine|{unit}")]
                excluded[adm_id] = "transfer"
            if kind == "multi_stay":
                later_in = out_time + pd.Timedelta(hours=6)
                later = (new_stay(), later_in, later_in + pd.Timedelta(hours=20), choice(ICU_UNITS))
                # later stay listed first in the file
                stays = [later] + stays
            for sid, tin, tout, u in stays:
                w.rows["icustays"].append((pid, adm_id, sid, _fmt(tin), _fmt(tout), u))
            first_stay = min(stays, key=lambda s: s[1])
            sid, tin, tout = first_stay[0], first_stay[1], first_stay[2]
            if adm_id in excluded:
                continue
            # events: a couple of hours before in_time through past the 48 h window
            t_end = min(tout, tin + pd.Timedelta(hours=50))
            if kind == "no_events":
                t0, t_end = tin - pd.Timedelta(hours=6), tin - pd.Timedelta(hours=1)
            else:
                t0 = tin - pd.Timedelta(hours=2)
            drop_temp = rng.random() < 0.1
            w.rows["chartevents"].extend(_vitals(rng, y, cfg, sid, t0, t_end, drop_temp, choice))
            if kind != "no_events":
                w.rows["chartevents"].extend(_anthro(rng, sid, tin + pd.Timedelta(minutes=45), choice))
                w.rows["outputevents"].extend(_urine(rng, sid, tin, t_end))
            else:
                w.rows["outputevents"].extend(_urine(rng, sid, t0, t_end))
            episodes.append((adm_id, sid))
            if kind == "multi_stay":
                # events for the later stay too; these must be ignored
                w.rows["chartevents"].extend(
                    _vitals(rng, y, cfg, stays[0][0], stays[0][1], stays[0][2], False, choice)
                )
        # diagnoses
        for a, (adm_id, _, _) in enumerate(adm_rows):
            for v, c in [NEG_CODES[int(k)] for k in rng.choice(len(NEG_CODES), size=2, replace=False)]:
                w.rows["diagnoses_icd"].append((pid, adm_id, v, c))
        if kind == "near_miss_codes":
            w.rows["diagnoses_icd"].append((pid, adm_rows[0][0], 9, "25001"))
            w.rows["diagnoses_icd"].append((pid, adm_rows[0][0], 10, "E109"))
        elif kind == "icd9_dotted_positive":
            w.rows["diagnoses_icd"].append((pid, adm_rows[0][0], 9, "250.02"))
        elif kind == "late_positive":
            w.rows["diagnoses_icd"].append((pid, adm_rows[-1][0], 10, "e119"))
        elif y:
            v, c = POS_CODES[int(rng.integers(0, len(POS_CODES)))]
            w.rows["diagnoses_icd"].append((pid, adm_rows[int(rng.integers(0, n_adm))][0], v, c))
        if fam:
            v, c = choice([(9, "V180"), (10, "Z833")])
            w.rows["diagnoses_icd"].append((pid, adm_rows[0][0], v, c))

        # modality windows are anchored on the admissions that produced episodes
        ep_adms = {a for a, _ in episodes}
        anchor = [r for r in adm_rows if r[0] in ep_adms] or adm_rows
        first_admit = anchor[0][1]

        # radiographs
        def add_cxr(when, view, tag):
            fname = f"cxr/{pid}_{tag}.png"
            Image.fromarray(_radiograph(rng, y, cfg), mode="L").save(out / fname)
            w.rows["cxr_metadata"].append((pid, _fmt(when), view, fname))

        if kind in ("ap_only", "ap_only_random"):
            add_cxr(first_admit + pd.Timedelta(days=1), "AP", "a")
            add_cxr(first_admit + pd.Timedelta(days=1), "LATERAL", "b")
            cxr_expected = None
        elif kind == "cxr_out_of_window":
            add_cxr(first_admit - pd.Timedelta(days=31), "PA", "a")
            cxr_expected = None
        elif kind == "cxr_choice":
            add_cxr(first_admit - pd.Timedelta(days=20), "AP", "a")
            add_cxr(first_admit + pd.Timedelta(days=5), "PA", "b")
            add_cxr(first_admit - pd.Timedelta(days=10), "PA", "c")
            cxr_expected = f"cxr/{pid}_c.png"
        else:
            when = first_admit + pd.Timedelta(days=float(rng.uniform(-25, 2)))
            add_cxr(when, "PA", "a")
            cxr_expected = f"cxr/{pid}_a.png"
            if rng.random() < 0.3:
                add_cxr(when, "LATERAL", "b")

        # ECGs
        def add_ecg(when, tag, missing_lead=None):
            fname = f"ecg/{pid}_{tag}.f32"
            write_waveform(out / fname, _ecg_waveform(rng, y, cfg, missing_lead))
            flags = "".join("1" if k == missing_lead else "0" for k in range(N_LEADS))
            w.rows["ecg_records"].append((pid, _fmt(when), fname, flags))

        adm0, dis0 = anchor[0][1], anchor[0][2]
        if kind in ("ecg_missing_lead", "ecg_missing_random"):
            add_ecg(adm0 + pd.Timedelta(hours=5), "a", missing_lead=int(rng.integers(0, N_LEADS)))
            ecg_expected = None
        elif kind == "ecg_out_of_window":
            add_ecg(adm0 - pd.Timedelta(days=2), "a")
            ecg_expected = None
        elif kind == "ecg_choice":
            add_ecg(adm0 + pd.Timedelta(hours=12), "a", missing_lead=3)
            add_ecg(adm0 + pd.Timedelta(days=3), "c")
            add_ecg(adm0 + pd.Timedelta(days=1), "b")
            ecg_expected = f"ecg/{pid}_b.f32"
        else:
            span = (dis0 - adm0) / pd.Timedelta(hours=1)
            add_ecg(adm0 + pd.Timedelta(hours=float(rng.uniform(1, span - 1))), "a")
            ecg_expected = f"ecg/{pid}_a.f32"

        ep_keys = [f"{pid}_{a}" for a, _ in episodes]
        if kind == "no_events":
            fate = "no_events"
        elif cxr_expected is None:
            fate = "no_cxr"
        elif ecg_expected is None:
            fate = "no_ecg"
        else:
            fate = "sample"
        expected_patients[str(pid)] = {
            "kind": kind,
            "label": y,
            "family_history": fam,
            "episodes": {k: sid for k, (_, sid) in zip(ep_keys, episodes)},
            "excluded_admissions": {str(k): v for k, v in excluded.items()},
            "fate": fate,
            "cxr": cxr_expected,
            "ecg": ecg_expected,
        }

    _write_tables(out, w)
    samples = sorted(k for p in expected_patients.values() if p["fate"] == "sample" for k in p["episodes"])
    expected = {
        "config": asdict(cfg),
        "patients": expected_patients,
        "samples": samples,
        "summary": {
            "patients": cfg.n_patients,
            "episodes": sum(len(p["episodes"]) for p in expected_patients.values()),
            "samples": len(samples),
            "positive_patients": sum(p["label"] for p in expected_patients.values()),
        },
    }
    (out / "expected.json").write_text(json.dumps(expected, indent=1, sort_keys=True, default=list))
    return expected


_COLUMNS = {
    "patients": ["patient_id", "sex", "anchor_age"],
    "admissions": ["patient_id", "admission_id", "admit_time", "discharge_time"],
    "icustays": ["patient_id", "admission_id", "stay_id", "in_time", "out_time", "care_unit"],
    "diagnoses_icd": ["patient_id", "admission_id", "icd_version", "icd_code"],
    "chartevents": ["stay_id", "chart_time", "variable_label", "value", "unit"],
    "outputevents": ["stay_id", "chart_time", "variable_label", "value", "unit"],
    "cxr_metadata": ["patient_id", "study_time", "view_position", "path"],
    "ecg_records": ["patient_id", "record_time", "path", "missing_flags"],
}


def _write_tables(out: Path, w: _Writer) -> None:
    for name, cols in _COLUMNS.items():
        df = pd.DataFrame(w.rows[name], columns=cols)
        df.to_csv(out / f"{name}.csv", index=False, lineterminator="\n")
