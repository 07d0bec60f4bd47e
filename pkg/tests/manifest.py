"""Compare a pipeline run on a fixture cohort against its ground-truth manifest."""

from collections import defaultdict
from pathlib import Path

from t2dm_screen import cxr, ecg
from t2dm_screen.dataset import BuildConfig, build_dataset
from t2dm_screen.ingest import extract_episodes, load_raw_cohort


def manifest_mismatches(root, expected: dict, cfg: BuildConfig = BuildConfig()) -> list[str]:
    root = Path(root)
    ds, report = build_dataset(root, cfg)
    episodes = extract_episodes(load_raw_cohort(root))
    by_pid = defaultdict(list)
    for ep in episodes:
        by_pid[str(ep.patient_id)].append(ep)
    no_events = set(report.excluded.get("no_events", []))
    metas = defaultdict(list)
    for m in cxr.read_cxr_metadata(root / "cxr_metadata.csv"):
        metas[str(m.patient_id)].append(m)
    recs = defaultdict(list)
    for r in ecg.read_ecg_records(root / "ecg_records.csv"):
        recs[str(r.patient_id)].append(r)
    sample_pids = {str(s.patient_id) for split in ds.splits.values() for s in split}

    bad = []
    for pid, want in expected["patients"].items():
        eps = by_pid.get(pid, [])
        got_eps = {e.key: e.stay_id for e in eps}
        if got_eps != want["episodes"]:
            bad.append(f"{pid}: episodes {got_eps} != {want['episodes']}")
        if eps and (eps[0].label, eps[0].family_history) != (want["label"], want["family_history"]):
            bad.append(f"{pid}: label/family history {(eps[0].label, eps[0].family_history)}")
        live = [e for e in eps if e.key not in no_events]
        # the manifest records what the selectors pick even for dropped patients
        pool = live or eps
        meta = cxr.select_cxr(pool, metas[pid]) if pool else None
        rec = ecg.select_ecg(pool, recs[pid]) if pool else None
        if want["cxr"] != (meta.path if meta else None):
            bad.append(f"{pid}: cxr {meta.path if meta else None} != {want['cxr']}")
        if want["ecg"] != (rec.path if rec else None):
            bad.append(f"{pid}: ecg {rec.path if rec else None} != {want['ecg']}")
        if pid in sample_pids:
            fate = "sample"
        elif not live:
            fate = "no_events"
        elif any(e.key in report.excluded.get("no_cxr", []) for e in live):
            fate = "no_cxr"
        elif any(e.key in report.excluded.get("no_ecg", []) for e in live):
            fate = "no_ecg"
        else:
            fate = "dropped"
        if eps and fate != want["fate"]:
            bad.append(f"{pid}: fate {fate} != {want['fate']}")
    got_samples = sorted(ds.ids())
    if got_samples != expected["samples"]:
        bad.append(f"samples {got_samples} != {expected['samples']}")
    return bad
