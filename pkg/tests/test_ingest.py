import pandas as pd
import pytest
from hypothesis import given, strategies as st

from t2dm_screen.ingest import (
    ConfigError,
    DataError,
    extract_episodes,
    label_and_flags,
    load_raw_cohort,
)

HEADERS = {
    "patients.csv": "patient_id,sex,anchor_age",
    "admissions.csv": "patient_id,admission_id,admit_time,discharge_time",
    "icustays.csv": "patient_id,admission_id,stay_id,in_time,out_time,care_unit",
    "diagnoses_icd.csv": "patient_id,admission_id,icd_version,icd_code",
}


def write_tables(root, **rows):
    for fname, header in HEADERS.items():
        body = rows.get(fname.split(".")[0], [])
        (root / fname).write_text("\n".join([header] + body) + "\n")
    return root


@pytest.fixture
def tiny(tmp_path):
    # 3 patients, 4 admissions
    return write_tables(
        tmp_path,
        patients=["1,F,60", "2,M,45", "3,F,70"],
        admissions=[
            "1,11,2150-01-01T00:00:00,2150-01-10T00:00:00",
            "1,12,2151-03-01T00:00:00,2151-03-05T00:00:00",
            "2,21,2140-05-01T08:00:00,2140-05-09T00:00:00",
            "3,31,2160-01-01T00:00:00,2160-01-03T00:00:00",
        ],
        icustays=[
            # two consecutive stays, listed later-first
            "1,11,112,2150-01-05T00:00:00,2150-01-06T00:00:00,SICU",
            "1,11,111,2150-01-02T00:00:00,2150-01-04T00:00:00,MICU",
            "1,12,121,2151-03-02T00:00:00,2151-03-03T00:00:00,MICU|Medicine|MICU",
            "2,21,211,2140-05-02T00:00:00,2140-05-04T00:00:00,CCU",
        ],
        diagnoses_icd=["1,12,10,E11.9", "2,21,9,25001", "2,21,10,Z833", "3,31,9,4019"],
    )


def test_counts(tiny):
    c = load_raw_cohort(tiny)
    assert c.counts() == {"patients": 3, "admissions": 4, "icu_stays": 4, "diagnoses": 4}
    assert c.errors == []


def test_episode_rules(tiny):
    eps = extract_episodes(load_raw_cohort(tiny))
    assert [e.key for e in eps] == ["1_11", "2_21"]
    first = eps[0]
    assert first.stay_id == 111
    assert first.icu_in_time == pd.Timestamp("2150-01-02")
    # label comes from admission 12 which itself was excluded (patient scope)
    assert first.label == 1 and first.sex == 1 and first.age == 60
    assert (eps[1].label, eps[1].family_history) == (0, 1)


def test_admission_label_scope(tiny):
    eps = extract_episodes(load_raw_cohort(tiny), label_scope="admission")
    assert eps[0].label == 0
    with pytest.raises(ConfigError):
        extract_episodes(load_raw_cohort(tiny), label_scope="visit")


def test_unknown_patient_reference(tmp_path):
    root = write_tables(
        tmp_path,
        patients=["1,F,60"],
        admissions=["1,11,2150-01-01T00:00:00,2150-01-05T00:00:00", "9,91,2150-01-01T00:00:00,2150-01-05T00:00:00"],
    )
    c = load_raw_cohort(root)
    assert len(c.admissions) == 1
    [err] = c.errors
    assert err.file == "admissions.csv" and err.line == 3 and "unknown patient" in err.message


def test_bad_timestamp_is_row_error(tmp_path):
    root = write_tables(
        tmp_path,
        patients=["1,F,60"],
        admissions=["1,11,2150-13-01T00:00:00,2150-01-05T00:00:00"],
    )
    c = load_raw_cohort(root)
    assert len(c.admissions) == 0
    assert str(c.errors[0]).startswith("admissions.csv:2:")


def test_inverted_stay_times(tmp_path):
    root = write_tables(
        tmp_path,
        patients=["1,F,60"],
        admissions=["1,11,2150-01-01T00:00:00,2150-01-05T00:00:00"],
        icustays=["1,11,5,2150-01-03T00:00:00,2150-01-02T00:00:00,MICU"],
    )
    c = load_raw_cohort(root)
    assert len(c.icu_stays) == 0 and "in_time" in c.errors[0].message


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_raw_cohort(tmp_path)


@pytest.mark.parametrize(
    "codes, expected",
    [
        ([(9, "25012")], (1, 0)),
        ([(9, "25000")], (1, 0)),
        ([(9, "250.02")], (1, 0)),
        ([(9, "25001")], (0, 0)),
        ([(9, "25003")], (0, 0)),
        ([(9, "2500")], (0, 0)),
        ([(10, "E119"), (10, "Z833")], (1, 1)),
        ([(10, "e11.65")], (1, 0)),
        ([(10, "E109")], (0, 0)),
        ([(9, "V180")], (0, 1)),
        ([(10, "V180")], (0, 0)),  # V180 is an ICD-9 code only
        ([(9, "E119")], (0, 0)),
        ([], (0, 0)),
    ],
)
def test_label_and_flags(codes, expected):
    assert label_and_flags(codes) == expected


def test_unknown_version():
    with pytest.raises(DataError):
        label_and_flags([(11, "E119")])


@given(st.lists(st.tuples(st.sampled_from([9, 10]), st.text("0123456789EVZ.", max_size=6)), max_size=8))
def test_label_is_order_free_and_monotone(codes):
    y, fam = label_and_flags(codes)
    assert label_and_flags(list(reversed(codes))) == (y, fam)
    y2, fam2 = label_and_flags(codes + [(10, "E11")])
    assert y2 == 1 and fam2 == fam


def test_episode_keys_unique(cohort60):
    root, _ = cohort60
    eps = extract_episodes(load_raw_cohort(root))
    keys = [(e.patient_id, e.admission_id) for e in eps]
    assert len(keys) == len(set(keys))
    order = [(e.patient_id, e.admit_time) for e in eps]
    assert order == sorted(order)
