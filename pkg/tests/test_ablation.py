import numpy as np
import pytest
import torch

from t2dm_screen import cxr
from t2dm_screen.ablation import (
    AblationSpec,
    image_noise,
    mask_cxr_fraction,
    n_masked,
    perturb_sample,
    perturb_split,
    run_ablation_suite,
    timeseries_noise,
)
from t2dm_screen.dataset import split_tensors
from t2dm_screen.ingest import ConfigError
from t2dm_screen.training import fit, image_transform, predict
from toys import tiny_train


@pytest.fixture(scope="module")
def trained(built60):
    ds, _ = built60
    cfg = tiny_train(max_epochs=1)
    model, _ = fit(ds, cfg)
    return ds, model, cfg


@pytest.mark.parametrize("family", ["gaussian", "poisson", "uniform"])
def test_timeseries_identity_at_zero(family):
    x = np.random.default_rng(0).normal(size=(96, 11))
    assert np.array_equal(timeseries_noise(x, family, 0.0, np.random.default_rng(1)), x)


@pytest.mark.parametrize("family", ["gaussian", "poisson", "salt_pepper"])
def test_image_identity_at_zero(family):
    x = np.random.default_rng(0).random((8, 8))
    assert np.array_equal(image_noise(x, family, 0.0, np.random.default_rng(1)), x)


def test_noise_moments():
    rng = np.random.default_rng(5)
    x = np.zeros(200_000)
    g = timeseries_noise(x, "gaussian", 0.5, rng)
    assert g.var() == pytest.approx(0.25, rel=0.02) and abs(g.mean()) < 0.01
    p = timeseries_noise(x, "poisson", 0.5, rng)
    assert p.var() == pytest.approx(0.25, rel=0.02) and abs(p.mean()) < 0.01
    u = timeseries_noise(x, "uniform", 0.5, rng)
    assert np.abs(u).max() <= 0.5 and u.var() == pytest.approx(0.25 / 3, rel=0.02)


def test_salt_and_pepper_fraction():
    x = np.full(100_000, 0.5)
    out = image_noise(x, "salt_pepper", 0.1, np.random.default_rng(3))
    hit = out != 0.5
    sd = np.sqrt(0.1 * 0.9 / x.size)
    assert abs(hit.mean() - 0.1) < 5 * sd
    assert set(np.unique(out[hit])) == {0.0, 1.0}


def test_image_noise_clamped():
    x = np.random.default_rng(0).random((32, 32))
    for fam in ("gaussian", "poisson"):
        out = image_noise(x, fam, 0.7, np.random.default_rng(1))
        assert out.min() >= 0 and out.max() <= 1


def test_invalid_noise():
    with pytest.raises(ConfigError):
        timeseries_noise(np.zeros(3), "salt_pepper", 0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        image_noise(np.zeros(3), "gaussian", -0.1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        AblationSpec(kind="dropout")
    with pytest.raises(ConfigError):
        AblationSpec(ratios=(1.5,))


def test_mask_counts():
    assert n_masked(2819, 0.3) == 846
    assert n_masked(2819, 0.5) == 1410 and n_masked(2819, 0.7) == 1973
    assert n_masked(0, 0.5) == 0 and n_masked(10, 1.0) == 10


def test_perturb_sample(built60):
    ds, _ = built60
    s = ds.splits["test"][0]
    noisy = perturb_sample(s, "gaussian", 0.5, seed=1)
    assert noisy.E.shape == s.E.shape and not np.array_equal(noisy.E, s.E)
    assert np.array_equal(perturb_sample(s, "gaussian", 0.0, seed=1).G, s.G)


def test_mask_cxr_fraction(trained):
    ds, model, _ = trained
    data = split_tensors(ds, "test", image_transform(model))
    masked, idx = mask_cxr_fraction(data, 0.5, seed=4)
    assert len(idx) == n_masked(len(data), 0.5)
    tf = data.transform
    blank = torch.from_numpy(cxr.preprocess_stage2(np.zeros((tf.side, tf.side), np.uint8), tf))
    before, after = data.images(), masked.images()
    for i in range(len(data)):
        assert torch.equal(after[i], blank) if i in idx else torch.equal(after[i], before[i])
    assert torch.equal(masked.E, data.E)
    again, idx2 = mask_cxr_fraction(data, 0.5, seed=4)
    assert np.array_equal(idx, idx2)


def test_zero_amplitude_split_reproduces_scores(trained):
    ds, model, _ = trained
    data = split_tensors(ds, "test", image_transform(model))
    same = perturb_split(data, "gaussian", "gaussian", 0.0, seed=0)
    assert np.allclose(predict(model, same), predict(model, data), atol=1e-6)


def test_noise_suite_layout(trained):
    ds, model, _ = trained
    spec = AblationSpec(kind="noise", bootstrap_iters=20)
    rep = run_ablation_suite(model, ds, spec)
    assert len(rep.cells) == 9 and rep.average is not None
    assert [c.level for c in rep.cells[:3]] == [0.1, 0.5, 0.7]
    assert {c.family for c in rep.cells} == {"gaussian/gaussian", "poisson/poisson", "uniform/salt_pepper"}
    assert len({c.seed for c in rep.cells}) == 9
    assert rep.to_csv().count("\n") == 1 + 3 * 11
    assert len(rep.to_text().splitlines()) == 2 + 1 + 9 + 1
    assert run_ablation_suite(model, ds, spec).to_csv() == rep.to_csv()


def test_identity_spec_reproduces_baseline(trained):
    ds, model, _ = trained
    rep = run_ablation_suite(model, ds, AblationSpec(kind="noise", amplitudes=(0.0,), bootstrap_iters=20))
    for c in rep.cells:
        assert c.report["AUROC"].point == pytest.approx(rep.baseline["AUROC"].point, abs=1e-9)
    rep = run_ablation_suite(model, ds, AblationSpec(kind="missing_cxr", ratios=(0.0,), bootstrap_iters=20))
    assert rep.cells[0].report["AUROC"].point == rep.baseline["AUROC"].point


def test_missing_and_no_pretrain_suites(trained):
    ds, model, cfg = trained
    rep = run_ablation_suite(model, ds, AblationSpec(kind="missing_cxr", bootstrap_iters=20))
    assert [c.level for c in rep.cells] == [0.3, 0.5, 0.7] and rep.average is None
    with pytest.raises(ConfigError):
        run_ablation_suite(model, ds, AblationSpec(kind="no_pretrain"))
    rep = run_ablation_suite(model, ds, AblationSpec(kind="no_pretrain", bootstrap_iters=20), cfg)
    assert len(rep.cells) == 1
