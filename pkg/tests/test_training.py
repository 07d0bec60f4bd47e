import math

import numpy as np
import pytest
import torch
from torch import nn

from t2dm_screen import training
from t2dm_screen.dataset import split_tensors
from t2dm_screen.training import (
    PlateauHalving,
    RunHistory,
    TrainConfig,
    TrainingDiverged,
    bce_loss,
    fit,
    image_transform,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    predict,
    save_checkpoint,
    validate,
    warmup_linear_lr,
)
from toys import tiny_train


def test_bce_values():
    assert bce_loss(torch.tensor([1.0]), torch.tensor([0.5])).item() == pytest.approx(math.log(2))
    assert bce_loss(torch.tensor([1.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)).item() \
        == pytest.approx(1e-7, rel=1e-3)
    big = bce_loss(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)).item()
    assert big == pytest.approx(-math.log(1e-7))
    with pytest.raises(ValueError):
        bce_loss(torch.ones(2), torch.ones(3))
    with pytest.raises(ValueError):
        bce_loss(torch.ones(0), torch.ones(0))


def test_zero_gradient_is_fixed_point():
    w = nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = make_optimizer([w], "adam", lr=0.1)
    w.grad = torch.zeros(2)
    for _ in range(3):
        optimizer_step(opt)
    assert torch.equal(w.detach(), torch.tensor([1.0, -2.0]))


def test_adamw_decay_is_decoupled():
    w = nn.Parameter(torch.tensor([2.0]))
    opt = make_optimizer([w], "adamw", lr=0.1, weight_decay=0.5)
    w.grad = torch.zeros(1)
    optimizer_step(opt)
    assert w.item() == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_nonfinite_gradient_rejected():
    w = nn.Parameter(torch.tensor([1.0]))
    opt = make_optimizer([w], "adam", lr=0.1)
    w.grad = torch.tensor([float("nan")])
    assert optimizer_step(opt) is False
    assert w.item() == 1.0
    with pytest.raises(ValueError):
        make_optimizer([w], "sgd", lr=0.1)


def test_warmup_linear():
    assert warmup_linear_lr(10, 100, 1.0) == pytest.approx(1.0)
    assert warmup_linear_lr(5, 100, 1.0) == pytest.approx(0.5)
    assert warmup_linear_lr(55, 100, 1.0) == pytest.approx(0.5)
    assert warmup_linear_lr(100, 100, 1.0) == 0.0
    lrs = [warmup_linear_lr(s, 100, 1.0) for s in range(1, 101)]
    peak = int(np.argmax(lrs))
    assert np.all(np.diff(lrs[: peak + 1]) > 0) and np.all(np.diff(lrs[peak:]) < 0)
    with pytest.raises(ValueError):
        warmup_linear_lr(1, 0, 1.0)


def test_plateau_halving():
    sched = PlateauHalving(1e-4, factor=0.5, patience=5)
    for _ in range(6):
        lr = sched.step(1.0)
    assert lr == 5e-5 and sched.reductions == 1
    assert sched.step(0.5) == 5e-5  # improvement resets the counter


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(model="vilt", strategy="joint")
    with pytest.raises(ValueError):
        TrainConfig(schedule="cosine")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"momentum": 0.9})
    assert TrainConfig.defaults("vilt").optimizer == "adamw"
    assert TrainConfig.defaults("resnet-lstm", "early").strategy == "early"


class _Const(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))
        self.value = value

    def forward(self, batch):
        return torch.full_like(batch["y"], self.value) + 0 * self.w


def test_divergence_raises_with_history(built60):
    ds, _ = built60
    tf = image_transform(type("M", (), {"cfg": type("C", (), {"image_side": 32})})())
    train = split_tensors(ds, "train", tf)
    val = split_tensors(ds, "val", tf)
    cfg = tiny_train(max_epochs=1)
    hist = RunHistory()
    with pytest.raises(TrainingDiverged) as err:
        training._train_loop(_Const(float("nan")), _Const(0.5).parameters(), train, val, cfg, hist, "joint", 1,
                             torch.Generator().manual_seed(0))
    assert err.value.history is hist and "non-finite" in hist.decisions[-1]


def test_validation_points_and_lr_trace(built60):
    ds, _ = built60
    cfg = tiny_train("vilt", max_epochs=2, batch_size=8)
    _, h = fit(ds, cfg)
    assert [p.epoch_fraction for p in h.points] == [0.5, 1.0, 1.5, 2.0]
    steps = h.points[-1].step
    assert len(h.lr_trace) == steps
    assert h.lr_trace == [warmup_linear_lr(s, steps, cfg.lr) for s in range(1, steps + 1)]


def test_early_stopping_restores_best(built60, monkeypatch):
    ds, _ = built60
    script = iter([0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2])
    snapshots = []
    real = training.validate

    def scripted(net, data, batch_size=256):
        loss, _ = real(net, data, batch_size)
        snapshots.append({k: v.clone() for k, v in net.state_dict().items()})
        return loss, next(script)

    monkeypatch.setattr(training, "validate", scripted)
    model, h = fit(ds, tiny_train(max_epochs=4, patience=2.0, batch_size=8))
    assert len(h.points) == 5 and h.points[-1].epoch_fraction == 2.5
    assert "early stop" in h.decisions[-1]
    for k, v in model.state_dict().items():
        assert torch.equal(v, snapshots[0][k])


def test_stage_two_freezes_encoders(built60, monkeypatch):
    ds, _ = built60
    captured = {}
    real = training._train_loop

    def spy(net, params, *args, **kw):
        if args[4] == "stage2":
            captured["before"] = {k: v.clone() for k, v in net.state_dict().items()}
        return real(net, params, *args, **kw)

    monkeypatch.setattr(training, "_train_loop", spy)
    model, h = fit(ds, tiny_train(strategy="early", max_epochs=2, stage1_epochs=1, batch_size=8))
    stages = [p.stage for p in h.points]
    assert stages[:2] == ["stage1-ehr", "stage1-ehr"] and "stage1-ecg" in stages and stages[-1] == "stage2"
    after = model.state_dict()
    for k, v in captured["before"].items():
        if k.startswith("classifier."):
            continue
        assert torch.equal(v, after[k]), k
    assert not torch.equal(captured["before"]["classifier.weight"], after["classifier.weight"])


def test_checkpoint_round_trip(built60, tmp_path):
    ds, _ = built60
    cfg = tiny_train(max_epochs=1)
    model, _ = fit(ds, cfg)
    save_checkpoint(model, tmp_path / "ck", cfg)
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta["train_config"]["seed"] == cfg.seed
    val = split_tensors(ds, "val", image_transform(model))
    assert validate(model, val) == validate(back, val)


def test_validation_leaves_no_gradients(built60):
    ds, _ = built60
    model, _ = fit(ds, tiny_train(max_epochs=1))
    model.train()
    for p in model.parameters():
        p.grad = None
    predict(model, split_tensors(ds, "val", image_transform(model)))
    assert model.training
    assert all(p.grad is None for p in model.parameters())


def test_fit_is_deterministic(built60, tmp_path):
    ds, _ = built60
    cfg = tiny_train("vilt", max_epochs=1, batch_size=8)
    a, ha = fit(ds, cfg, run_dir=tmp_path / "a")
    b, hb = fit(ds, cfg, run_dir=tmp_path / "b")
    assert ha.points == hb.points and ha.lr_trace == hb.lr_trace
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()
    assert (tmp_path / "a/checkpoint.bin").read_bytes() == (tmp_path / "b/checkpoint.bin").read_bytes()


def test_run_directory_contents(built60, tmp_path):
    ds, _ = built60
    fit(ds, tiny_train(max_epochs=1), run_dir=tmp_path / "r", echo={"dataset_path": "x"})
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert names == {"config.json", "history.csv", "history.json", "checkpoint.json", "checkpoint.bin"}
