import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from t2dm_screen.cxr import PixelTransform
from t2dm_screen.dataset import (
    BuildConfig,
    IntegrityError,
    Sample,
    apply_standardizer,
    build_dataset,
    fit_standardizer,
    load_dataset,
    partition,
    persist_dataset,
    split_counts,
    split_tensors,
)
from t2dm_screen.ingest import ConfigError, DataError


def test_published_split_sizes():
    assert split_counts(14091) == (9863, 1409, 2819)


def test_degenerate_ratios():
    parts = partition(list(range(10)), (1.0, 0.0, 0.0), seed=5)
    assert sorted(parts["train"]) == list(range(10)) and parts["val"] == parts["test"] == []


def test_partition_errors():
    with pytest.raises(DataError):
        partition([1, 2], seed=0)
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.5, 0.5))


def test_partition_deterministic():
    ids = [f"p{i}" for i in range(10)]
    assert partition(ids, seed=11) == partition(ids, seed=11)
    assert partition(ids, seed=11) != partition(ids, seed=12)


@settings(max_examples=80, deadline=None)
@given(st.integers(3, 400), st.integers(0, 2**32 - 1))
def test_partition_disjoint_exhaustive(n, seed):
    ids = list(range(n))
    parts = partition(ids, seed=seed)
    flat = parts["train"] + parts["val"] + parts["test"]
    assert sorted(flat) == ids
    assert (len(parts["train"]), len(parts["val"]), len(parts["test"])) == split_counts(n)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=120), st.integers(0, 1000))
def test_group_partition_keeps_patients_together(groups, seed):
    ids = list(range(len(groups)))
    if len(set(groups)) < 3:
        return
    parts = partition(ids, seed=seed, groups=groups)
    where = {}
    for split, members in parts.items():
        for i in members:
            assert where.setdefault(groups[i], split) == split
    assert sorted(i for v in parts.values() for i in v) == ids


def sample(E, G=None, sid="s"):
    return Sample(sid, 1, 0, np.asarray(E, dtype=np.float64), np.ones(12, np.int8), "1", G)


def test_standardizer_arithmetic():
    col = np.array([[8.0], [10.0], [12.0]])
    E = np.hstack([col, np.full((3, 1), 7.0)])
    stats = fit_standardizer([sample(E)])
    assert stats.e_mean.tolist() == [10.0, 7.0]
    assert stats.e_std[0] == pytest.approx(math.sqrt(8 / 3))
    assert stats.e_std[1] == 1.0
    out = apply_standardizer(sample(E), stats)
    assert np.all(out.E[:, 1] == 0)
    stats.e_mean[:] = [8.0, 0.0]
    stats.e_std[:] = [2.0, 1.0]
    assert apply_standardizer(sample([[10.0, 0.0]]), stats).E[0, 0] == 1.0


def test_standardize_twice_refused():
    s = sample(np.eye(3))
    st_ = fit_standardizer([s])
    with pytest.raises(ValueError):
        apply_standardizer(apply_standardizer(s, st_), st_)


def test_sample_estimator_option():
    E = np.array([[8.0], [10.0], [12.0]])
    assert fit_standardizer([sample(E)], ddof=1).e_std[0] == pytest.approx(2.0)


def test_built_shapes_and_masks(built60):
    ds, _ = built60
    for split in ds.splits.values():
        for s in split:
            assert s.E.shape == (96, 11) and s.G.shape == (100, 12)
            assert s.ehr_mask.shape == (12,) and s.ecg_mask.shape == (13,)
            assert s.ehr_mask[0] == 1 and s.ecg_mask[0] == 1
            assert s.standardized and s.y in (0, 1)


def test_train_columns_standardized(built60):
    ds, _ = built60
    for attr in ("E", "G"):
        x = np.concatenate([getattr(s, attr).astype(np.float64) for s in ds.splits["train"]])
        mean, std = x.mean(axis=0), x.std(axis=0)
        const = std < 1e-9
        assert np.all(np.abs(mean[~const]) < 1e-6)
        assert np.all(np.abs(std[~const] - 1) < 1e-6)
        assert np.all(x[:, const] == 0)


def test_stats_from_train_only(built60, cohort60):
    ds, _ = built60
    root, _ = cohort60
    other, _ = build_dataset(root, BuildConfig(seed=4))
    # a different split gives different train statistics
    assert not np.allclose(ds.stats.e_mean, other.stats.e_mean)


def test_no_ecg_variant_same_ids(built60, cohort60):
    ds, _ = built60
    root, _ = cohort60
    noecg, _ = build_dataset(root, BuildConfig(seed=3, variant="no-ecg"))
    assert {k: [s.sample_id for s in v] for k, v in noecg.splits.items()} == {
        k: [s.sample_id for s in v] for k, v in ds.splits.items()
    }
    assert all(s.G is None and s.ecg_mask is None for v in noecg.splits.values() for s in v)
    assert np.array_equal(noecg.stats.e_mean, ds.stats.e_mean)


def test_independent_no_ecg_pipeline_keeps_more(cohort60):
    root, expected = cohort60
    loose, _ = build_dataset(root, BuildConfig(seed=3, variant="no-ecg", require_ecg=False))
    strict, _ = build_dataset(root, BuildConfig(seed=3, variant="no-ecg"))
    assert set(strict.ids()) <= set(loose.ids())
    with pytest.raises(ConfigError):
        BuildConfig(variant="ecg", require_ecg=False)


def test_round_trip(built60, tmp_path):
    ds, rep = built60
    persist_dataset(ds, tmp_path / "d", rep)
    back = load_dataset(tmp_path / "d")
    assert back.variant == "ecg" and back.feature_names == ds.feature_names
    for split in ds.splits:
        for a, b in zip(ds.splits[split], back.splits[split], strict=True):
            assert a.sample_id == b.sample_id and a.y == b.y
            for attr in ("E", "G", "ehr_mask", "ecg_mask"):
                assert np.array_equal(getattr(a, attr), getattr(b, attr))
    for k in ds.images:
        assert np.array_equal(ds.images[k], back.images[k])
    assert np.array_equal(back.stats.e_std, ds.stats.e_std)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["variant"] == "ecg"

    # refitting on the persisted (already standardized) train split is the identity
    refit = fit_standardizer(back.splits["train"])
    assert np.allclose(refit.e_mean, 0, atol=1e-6)


def test_integrity_errors(built60, tmp_path):
    ds, _ = built60
    root = persist_dataset(ds, tmp_path / "d")
    blob = root / "train_E.f32"
    data = blob.read_bytes()
    blob.write_bytes(data[:-4])
    with pytest.raises(IntegrityError, match="bytes"):
        load_dataset(root)
    blob.write_bytes(data[:-4] + b"\0\0\0\1")
    with pytest.raises(IntegrityError, match="checksum"):
        load_dataset(root)
    blob.write_bytes(data)
    m = json.loads((root / "manifest.json").read_text())
    m["format_version"] = 99
    (root / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(IntegrityError, match="version"):
        load_dataset(root)


def tree_digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_byte_identical_builds(cohort60, tmp_path):
    root, _ = cohort60
    for name in ("a", "b"):
        ds, rep = build_dataset(root, BuildConfig(seed=9))
        persist_dataset(ds, tmp_path / name, rep)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_split_tensors(built60):
    ds, _ = built60
    t = split_tensors(ds, "train", PixelTransform(side=32))
    b = t.batch([0, 2, 1])
    assert b["E"].shape == (3, 96, 11) and b["G"].shape == (3, 100, 12) and b["C"].shape == (3, 3, 32, 32)
    assert b["y"].tolist() == [float(ds.splits["train"][i].y) for i in (0, 2, 1)]
    # episodes of one patient share the image bank entry
    assert t.C_bank.shape[0] == len({s.image_key for s in ds.splits["train"]})
