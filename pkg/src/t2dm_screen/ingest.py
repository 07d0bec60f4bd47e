"""Raw MIMIC-format tables -> labelled episodes.

An episode is one (patient, admission, first ICU stay) unit. Only four tables
are read: ``patients.csv``, ``admissions.csv``, ``icustays.csv`` and
``diagnoses_icd.csv``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

TIME_FORMAT = "%Y-%m-%dT%H:%M:%S"

# A care-unit sequence is stored as one ``|``-separated field per ICU stay.
CARE_UNIT_SEP = "|"

DEFAULT_ICU_UNITS = (
    "MICU",
    "SICU",
    "CCU",
    "CSRU",
    "TSICU",
    "CVICU",
    "NICU",
    "Neuro SICU",
    "MICU/SICU",
    "Medical Intensive Care Unit (MICU)",
    "Surgical Intensive Care Unit (SICU)",
    "Medical/Surgical Intensive Care Unit (MICU/SICU)",
    "Coronary Care Unit (CCU)",
    "Cardiac Vascular Intensive Care Unit (CVICU)",
    "Trauma SICU (TSICU)",
    "Neuro Surgical Intensive Care Unit (Neuro SICU)",
    "Neuro Intermediate",
    "Neuro Stepdown",
)

TABLES = {
    "patients": ("patients.csv", ["patient_id", "sex", "anchor_age"]),
    "admissions": (
        "admissions.csv",
        ["patient_id", "admission_id", "admit_time", "discharge_time"],
    ),
    "icu_stays": (
        "icustays.csv",
        ["patient_id", "admission_id", "stay_id", "in_time", "out_time", "care_unit"],
    ),
    "diagnoses": (
        "diagnoses_icd.csv",
        ["patient_id", "admission_id", "icd_version", "icd_code"],
    ),
}

_T2DM_ICD9 = re.compile(r"^250\d[02]$")
_T2DM_ICD10 = re.compile(r"^E11")
_FAMILY_ICD9 = "V180"
_FAMILY_ICD10 = "Z833"


class ConfigError(Exception):
    """Fatal configuration problem (missing file, bad option)."""


class DataError(Exception):
    """Row-level or referential problem in the input tables."""


@dataclass(frozen=True)
class RowError:
    file: str
    line: int
    message: str

    def __str__(self) -> str:
        return f"{self.file}:{self.line}: {self.message}"


@dataclass
class RawCohort:
    patients: pd.DataFrame
    admissions: pd.DataFrame
    icu_stays: pd.DataFrame
    diagnoses: pd.DataFrame
    errors: list[RowError] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        return {
            "patients": len(self.patients),
            "admissions": len(self.admissions),
            "icu_stays": len(self.icu_stays),
            "diagnoses": len(self.diagnoses),
        }


@dataclass(frozen=True)
class Episode:
    patient_id: int
    admission_id: int
    stay_id: int
    icu_in_time: pd.Timestamp
    admit_time: pd.Timestamp
    discharge_time: pd.Timestamp
    age: float
    sex: int
    label: int = 0
    family_history: int = 0

    @property
    def key(self) -> str:
        return f"{self.patient_id}_{self.admission_id}"


def _read_table(raw_dir: Path, name: str) -> pd.DataFrame:
    fname, columns = TABLES[name]
    path = raw_dir / fname
    if not path.is_file():
        raise ConfigError(f"missing input table: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ConfigError(f"{fname}: missing columns {missing}")
    df = df[columns].copy()
    # header is line 1
    df["_line"] = range(2, len(df) + 2)
    return df


def _parse_times(df, cols, fname, errors):
    bad = pd.Series(False, index=df.index)
    for col in cols:
        parsed = pd.to_datetime(df[col], format=TIME_FORMAT, errors="coerce")
        for line, raw in zip(df.loc[parsed.isna(), "_line"], df.loc[parsed.isna(), col]):
            errors.append(RowError(fname, int(line), f"unparseable timestamp in {col}: {raw!r}"))
        bad |= parsed.isna()
        df[col] = parsed
    return df[~bad]


def _parse_ints(df, cols, fname, errors):
    bad = pd.Series(False, index=df.index)
    for col in cols:
        parsed = pd.to_numeric(df[col], errors="coerce")
        nonint = parsed.isna() | (parsed != parsed.round())
        for line, raw in zip(df.loc[nonint, "_line"], df.loc[nonint, col]):
            errors.append(RowError(fname, int(line), f"non-integer {col}: {raw!r}"))
        bad |= nonint
        df[col] = parsed
    df = df[~bad].copy()
    for col in cols:
        df[col] = df[col].astype("int64")
    return df


def _drop_orphans(df, key_cols, parent, parent_cols, fname, what, errors):
    keys = pd.MultiIndex.from_frame(df[key_cols])
    parent_keys = pd.MultiIndex.from_frame(parent[parent_cols].set_axis(key_cols, axis=1))
    ok = keys.isin(parent_keys)
    for line, row in zip(df.loc[~ok, "_line"], df.loc[~ok, key_cols].itertuples(index=False)):
        errors.append(RowError(fname, int(line), f"references unknown {what} {tuple(row)}"))
    return df[ok]


def load_raw_cohort(raw_dir) -> RawCohort:
    """Read and cross-link the four cohort tables.

    Malformed rows are removed from the returned frames and recorded in
    ``RawCohort.errors``; nothing is dropped without a matching error entry.
    """
    raw_dir = Path(raw_dir)
    errors: list[RowError] = []

    pat = _read_table(raw_dir, "patients")
    pat = _parse_ints(pat, ["patient_id"], "patients.csv", errors)
    age = pd.to_numeric(pat["anchor_age"], errors="coerce")
    for line, raw in zip(pat.loc[age.isna(), "_line"], pat.loc[age.isna(), "anchor_age"]):
        errors.append(RowError("patients.csv", int(line), f"non-numeric anchor_age: {raw!r}"))
    pat = pat.assign(anchor_age=age)[age.notna()]
    sex = pat["sex"].str.strip().str.upper().map({"F": 1, "M": 2, "1": 1, "2": 2})
    for line, raw in zip(pat.loc[sex.isna(), "_line"], pat.loc[sex.isna(), "sex"]):
        errors.append(RowError("patients.csv", int(line), f"unknown sex code: {raw!r}"))
    pat = pat.assign(sex=sex)[sex.notna()]
    pat["sex"] = pat["sex"].astype("int64")
    dup = pat["patient_id"].duplicated()
    for line in pat.loc[dup, "_line"]:
        errors.append(RowError("patients.csv", int(line), "duplicate patient_id"))
    pat = pat[~dup]

    adm = _read_table(raw_dir, "admissions")
    adm = _parse_ints(adm, ["patient_id", "admission_id"], "admissions.csv", errors)
    adm = _parse_times(adm, ["admit_time", "discharge_time"], "admissions.csv", errors)
    adm = _drop_orphans(adm, ["patient_id"], pat, ["patient_id"], "admissions.csv", "patient", errors)
    dup = adm["admission_id"].duplicated()
    for line in adm.loc[dup, "_line"]:
        errors.append(RowError("admissions.csv", int(line), "duplicate admission_id"))
    adm = adm[~dup]

    icu = _read_table(raw_dir, "icu_stays")
    icu = _parse_ints(icu, ["patient_id", "admission_id", "stay_id"], "icustays.csv", errors)
    icu = _parse_times(icu, ["in_time", "out_time"], "icustays.csv", errors)
    inverted = icu["in_time"] >= icu["out_time"]
    for line in icu.loc[inverted, "_line"]:
        errors.append(RowError("icustays.csv", int(line), "in_time not before out_time"))
    icu = icu[~inverted]
    icu = _drop_orphans(
        icu, ["patient_id", "admission_id"], adm, ["patient_id", "admission_id"],
        "icustays.csv", "admission", errors,
    )

    dx = _read_table(raw_dir, "diagnoses")
    dx = _parse_ints(dx, ["patient_id", "admission_id", "icd_version"], "diagnoses_icd.csv", errors)
    badver = ~dx["icd_version"].isin([9, 10])
    for line, v in zip(dx.loc[badver, "_line"], dx.loc[badver, "icd_version"]):
        errors.append(RowError("diagnoses_icd.csv", int(line), f"unknown icd_version {v}"))
    dx = dx[~badver]
    empty = dx["icd_code"].str.strip() == ""
    for line in dx.loc[empty, "_line"]:
        errors.append(RowError("diagnoses_icd.csv", int(line), "empty icd_code"))
    dx = dx[~empty]
    dx = _drop_orphans(
        dx, ["patient_id", "admission_id"], adm, ["patient_id", "admission_id"],
        "diagnoses_icd.csv", "admission", errors,
    )

    return RawCohort(
        patients=pat.reset_index(drop=True),
        admissions=adm.reset_index(drop=True),
        icu_stays=icu.reset_index(drop=True),
        diagnoses=dx.reset_index(drop=True),
        errors=errors,
    )


def _normalize_code(code: str) -> str:
    return code.strip().replace(".", "").upper()


def label_and_flags(patient_diagnoses) -> tuple[int, int]:
    """Return ``(t2dm_label, family_history)`` for (icd_version, code) pairs."""
    y = fam = 0
    for version, code in patient_diagnoses:
        c = _normalize_code(code)
        if version == 9:
            if _T2DM_ICD9.match(c):
                y = 1
            if c.startswith(_FAMILY_ICD9):
                fam = 1
        elif version == 10:
            if _T2DM_ICD10.match(c):
                y = 1
            if c.startswith(_FAMILY_ICD10):
                fam = 1
        else:
            raise DataError(f"unknown icd_version {version!r}")
    return y, fam


def _is_icu(unit: str, icu_units: frozenset[str]) -> bool:
    return unit.strip().lower() in icu_units


def extract_episodes(
    cohort: RawCohort,
    icu_units=DEFAULT_ICU_UNITS,
    label_scope: str = "patient",
) -> list[Episode]:
    """Reduce a cohort to one labelled episode per qualifying admission.

    Admissions without an ICU stay are skipped, as are admissions whose
    care-unit records mix ICU and non-ICU units (ward transfers). Of several
    ICU stays in one admission only the earliest is kept. Labels are assigned
    per patient (any qualifying code in any admission) unless
    ``label_scope="admission"``.
    """
    if label_scope not in ("patient", "admission"):
        raise ConfigError(f"label_scope must be 'patient' or 'admission', got {label_scope!r}")
    units = frozenset(u.lower() for u in icu_units)

    pats = cohort.patients.set_index("patient_id")
    dx_groups: dict = {}
    key = "patient_id" if label_scope == "patient" else "admission_id"
    for k, grp in cohort.diagnoses.groupby(key, sort=True):
        dx_groups[k] = label_and_flags(zip(grp["icd_version"], grp["icd_code"]))

    stays = cohort.icu_stays.sort_values(["admission_id", "in_time", "stay_id"], kind="mergesort")
    stays_by_adm = {a: g for a, g in stays.groupby("admission_id", sort=False)}

    adms = cohort.admissions.sort_values(["patient_id", "admit_time", "admission_id"], kind="mergesort")
    episodes: list[Episode] = []
    for row in adms.itertuples(index=False):
        grp = stays_by_adm.get(row.admission_id)
        if grp is None:
            continue
        seq = [u for cu in grp["care_unit"] for u in cu.split(CARE_UNIT_SEP) if u.strip()]
        flags = {_is_icu(u, units) for u in seq}
        if len(flags) > 1 or flags == {False}:
            continue
        first = grp.iloc[0]
        p = pats.loc[row.patient_id]
        y, fam = dx_groups.get(row.patient_id if label_scope == "patient" else row.admission_id, (0, 0))
        episodes.append(
            Episode(
                patient_id=int(row.patient_id),
                admission_id=int(row.admission_id),
                stay_id=int(first["stay_id"]),
                icu_in_time=first["in_time"],
                admit_time=row.admit_time,
                discharge_time=row.discharge_time,
                age=float(p["anchor_age"]),
                sex=int(p["sex"]),
                label=y,
                family_history=fam,
            )
        )
    return episodes
