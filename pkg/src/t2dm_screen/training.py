"""BCE loss, guarded optimizers, LR schedules and the training strategies.

Strategies:

* ``vilt``  - end-to-end training of the early-fusion transformer.
* ``joint`` - end-to-end training of the ResNet-LSTM on all modalities.
* ``early`` - stage 1 trains each ResNet-LSTM encoder with its auxiliary head
  on its own modality; stage 2 freezes the encoders (weights *and* BatchNorm
  statistics) and trains only the final classifier.

Validation runs twice per training epoch (at the batch closest to the middle
and at the end). Early stopping monitors validation AUROC; the best state is
restored before returning.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import metrics
from .cxr import PixelTransform
from .dataset import Dataset, SplitTensors, split_tensors
from .kernels import load_weights, read_weights, save_weights, set_determinism
from .models import build_model, model_config

BCE_EPS = 1e-7
STRATEGIES = ("vilt", "joint", "early")
# toy-scale optimisation settings, tuned once on the 1000-patient synthetic cohort
TOY_OVERRIDES = {
    "vilt": dict(lr=3e-4, batch_size=32),
    "resnet-lstm": dict(lr=1e-3, batch_size=64, max_epochs=15),
}
SCHEDULES = ("warmup_linear", "plateau", "constant")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``history`` holds everything recorded so far."""

    def __init__(self, msg: str, history: "RunHistory"):
        super().__init__(msg)
        self.history = history


# --- loss -------------------------------------------------------------------

def bce_loss(y: Tensor, p: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    if y.shape != p.shape:
        raise ValueError(f"labels {tuple(y.shape)} and predictions {tuple(p.shape)} differ")
    if y.numel() == 0:
        raise ValueError("empty batch")
    p = p.clamp(eps, 1 - eps)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


# --- optimizers -------------------------------------------------------------

def make_optimizer(params, kind: str, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
    params = [p for p in params if p.requires_grad]
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(opt: torch.optim.Optimizer) -> bool:
    """Step unless some gradient is non-finite; returns whether it stepped."""
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                return False
    opt.step()
    return True


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


# --- schedules --------------------------------------------------------------

def warmup_linear_lr(step: int, total: int, peak: float, warmup_fraction: float = 0.1) -> float:
    """LR for update number ``step`` (1-based) out of ``total``.

    Linear 0 -> peak over the warmup steps, then linear back to 0 at ``total``.
    """
    if total <= 0:
        raise ValueError("total steps must be positive")
    warmup = int(round(warmup_fraction * total))
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup))


class PlateauHalving:
    """Multiply the LR by ``factor`` after ``patience`` consecutive non-improving losses."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad = 0
        self.reductions = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.reductions += 1
                self.bad = 0
        return self.lr


# --- config / history -------------------------------------------------------

@dataclass
class TrainConfig:
    model: str = "resnet-lstm"
    strategy: str = "joint"
    batch_size: int = 64
    max_epochs: int = 50
    lr: float = 1e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    schedule: str = "plateau"
    warmup_fraction: float = 0.1
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    patience: float = 5.0  # training epochs without a new best validation AUROC
    val_per_epoch: int = 2
    stage1_epochs: int | None = None  # early strategy; defaults to max_epochs
    seed: int = 0
    threads: int | None = None
    model_config: dict = field(default_factory=dict)
    pretrained: str | None = None  # weight file for the image encoder
    max_steps: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if (self.model == "vilt") != (self.strategy == "vilt"):
            raise ValueError(f"strategy {self.strategy!r} is not valid for model {self.model!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.val_per_epoch < 1:
            raise ValueError("batch_size, max_epochs and val_per_epoch must be positive")

    @classmethod
    def defaults(cls, model: str, strategy: str | None = None, **kw) -> "TrainConfig":
        if model == "vilt":
            base = dict(model="vilt", strategy="vilt", batch_size=256, max_epochs=20, lr=1e-4,
                        optimizer="adamw", weight_decay=0.01, schedule="warmup_linear", patience=2.0)
        elif model == "resnet-lstm":
            base = dict(model="resnet-lstm", strategy=strategy or "joint", batch_size=64, max_epochs=50,
                        lr=1e-4, optimizer="adam", weight_decay=0.0, schedule="plateau", patience=5.0)
        else:
            raise ValueError(f"unknown model kind {model!r}")
        base.update(kw)
        return cls.from_dict(base)

    @classmethod
    def toy(cls, model: str, strategy: str | None = None, **kw) -> "TrainConfig":
        """Defaults with the toy-scale learning rate, batch size and epoch budget."""
        return cls.defaults(model, strategy, **{**TOY_OVERRIDES[model], **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ValPoint:
    stage: str
    epoch_fraction: float
    step: int
    train_loss: float
    val_loss: float
    val_auroc: float
    lr: float


@dataclass
class RunHistory:
    points: list[ValPoint] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    decisions: list[str] = field(default_factory=list)
    rejected_steps: int = 0
    wall_clock: float = 0.0

    def stage_points(self, stage: str) -> list[ValPoint]:
        return [p for p in self.points if p.stage == stage]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f.name for f in fields(ValPoint)])
        for p in self.points:
            w.writerow([p.stage, repr(p.epoch_fraction), p.step, repr(p.train_loss), repr(p.val_loss),
                        repr(p.val_auroc), repr(p.lr)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return asdict(self)


# --- inference --------------------------------------------------------------

@torch.no_grad()
def predict(net, data: SplitTensors, batch_size: int = 256) -> np.ndarray:
    was_training = net.training
    net.eval()
    out = []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        out.append(net(data.batch(idx)).detach().double().numpy())
    net.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def _safe_auroc(scores, labels) -> float:
    try:
        return metrics.auroc(scores, labels)
    except metrics.UndefinedMetric:
        return float("nan")


def validate(net, data: SplitTensors, batch_size: int = 256) -> tuple[float, float]:
    scores = predict(net, data, batch_size)
    y = data.y.double().numpy()
    loss = float(bce_loss(torch.from_numpy(y), torch.from_numpy(scores)))
    return loss, _safe_auroc(scores, y)


# --- the loop ---------------------------------------------------------------

class _AuxNet(nn.Module):
    """One ResNet-LSTM encoder + its auxiliary head, fed a single modality."""

    _INPUT = {"ehr": "E", "ecg": "G", "cxr": "C"}

    def __init__(self, model, modality: str):
        super().__init__()
        self.modality = modality
        self.encoder = model.encoders()[modality]
        self.head = model.heads()[modality]

    def forward(self, batch: dict) -> Tensor:
        z = self.encoder(batch[self._INPUT[self.modality]])
        if isinstance(z, tuple):
            z = z[1]
        return torch.sigmoid(self.head(z)[:, 0])


def _better(a: float, b: float) -> bool:
    if math.isnan(a):
        return False
    return math.isnan(b) or a > b


def _train_loop(net, params, train: SplitTensors, val: SplitTensors, cfg: TrainConfig, history: RunHistory,
                stage: str, epochs: int, gen: torch.Generator, set_mode=None) -> None:
    """Train ``params`` of ``net`` in place; leaves ``net`` at its best validation state."""
    set_mode = set_mode or (lambda: net.train())
    params = [p for p in params if p.requires_grad]
    opt = make_optimizer(params, cfg.optimizer, cfg.lr, cfg.weight_decay)
    n = len(train)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = steps_per_epoch * epochs
    plateau = PlateauHalving(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    # validation after these batch indices (1-based) within an epoch
    checkpoints = sorted({max(1, round(steps_per_epoch * k / cfg.val_per_epoch)) for k in range(1, cfg.val_per_epoch + 1)})

    best_auroc, best_frac, best_state = float("nan"), None, None
    step = 0
    running, running_n = 0.0, 0
    for epoch in range(epochs):
        order = torch.randperm(n, generator=gen)
        set_mode()
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = train.batch(idx)
            step += 1
            if cfg.schedule == "warmup_linear":
                set_lr(opt, warmup_linear_lr(step, total_steps, cfg.lr, cfg.warmup_fraction))
            elif cfg.schedule == "plateau":
                set_lr(opt, plateau.lr)
            opt.zero_grad(set_to_none=True)
            loss = bce_loss(batch["y"], net(batch))
            if not torch.isfinite(loss):
                history.decisions.append(f"{stage}: non-finite loss at step {step}; aborting")
                raise TrainingDiverged(f"non-finite loss at step {step} ({stage})", history)
            loss.backward()
            if not optimizer_step(opt):
                history.rejected_steps += 1
                history.decisions.append(f"{stage}: step {step} rejected (non-finite gradient)")
            history.lr_trace.append(opt.param_groups[0]["lr"])
            running += float(loss.detach()) * len(idx)
            running_n += len(idx)

            if b + 1 in checkpoints:
                frac = epoch + checkpoints.index(b + 1) / len(checkpoints) + 1 / len(checkpoints)
                frac = round(frac, 6)
                v_loss, v_auc = validate(net, val)
                set_mode()
                history.points.append(ValPoint(stage, frac, step, running / max(running_n, 1), v_loss, v_auc,
                                               opt.param_groups[0]["lr"]))
                running, running_n = 0.0, 0
                if best_state is None or _better(v_auc, best_auroc):
                    best_auroc, best_frac = v_auc, frac
                    best_state = copy.deepcopy(net.state_dict())
                elif frac - best_frac >= cfg.patience - 1e-9:
                    history.decisions.append(
                        f"{stage}: early stop at epoch {frac:g}; best AUROC {best_auroc:.6f} at epoch {best_frac:g}"
                    )
                    net.load_state_dict(best_state)
                    return
            if cfg.max_steps is not None and step >= cfg.max_steps:
                history.decisions.append(f"{stage}: step budget {cfg.max_steps} reached")
                if best_state is not None:
                    net.load_state_dict(best_state)
                return
        if cfg.schedule == "plateau":
            before = plateau.lr
            plateau.step(history.points[-1].val_loss)
            if plateau.lr != before:
                history.decisions.append(f"{stage}: lr {before:g} -> {plateau.lr:g} after epoch {epoch + 1}")
    history.decisions.append(f"{stage}: finished {epochs} epochs; best AUROC {best_auroc:.6f} at epoch {best_frac:g}")
    net.load_state_dict(best_state)


def image_transform(model) -> PixelTransform:
    return PixelTransform(side=model.cfg.image_side)


def fit(dataset: Dataset, cfg: TrainConfig, run_dir=None, cache: dict | None = None, model=None,
        echo: dict | None = None):
    """Train a model on ``dataset``; returns ``(model, RunHistory)``.

    Pass ``model`` to continue from an existing instance instead of building one.
    """
    t0 = time.perf_counter()
    set_determinism(cfg.seed, cfg.threads)
    if model is None:
        model = build_model(cfg.model, cfg.model_config, use_ecg=dataset.with_ecg)
    if cfg.pretrained:
        load_weights(model.image_encoder(), cfg.pretrained)
    tf = image_transform(model)
    cache = {} if cache is None else cache
    train = split_tensors(dataset, "train", tf, cache)
    val = split_tensors(dataset, "val", tf, cache)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training needs non-empty train and val splits")
    gen = torch.Generator().manual_seed(cfg.seed)
    history = RunHistory()

    if cfg.strategy in ("vilt", "joint"):
        _train_loop(model, model.parameters(), train, val, cfg, history, cfg.strategy, cfg.max_epochs, gen)
    else:
        stage1 = cfg.stage1_epochs or cfg.max_epochs
        for name in model.encoders():
            aux = _AuxNet(model, name)
            _train_loop(aux, aux.parameters(), train, val, cfg, history, f"stage1-{name}", stage1, gen)
        encoders = list(model.encoders().values())
        for enc in encoders:
            for p in enc.parameters():
                p.requires_grad_(False)

        def frozen_mode():
            model.train()
            for enc in encoders:
                enc.eval()

        _train_loop(model, model.classifier.parameters(), train, val, cfg, history, "stage2", cfg.max_epochs,
                    gen, set_mode=frozen_mode)
        for enc in encoders:
            for p in enc.parameters():
                p.requires_grad_(True)
    model.eval()
    history.wall_clock = time.perf_counter() - t0
    if run_dir is not None:
        write_run(run_dir, model, cfg, history, dataset, echo)
    return model, history


# --- checkpoints / run directories -------------------------------------------

def save_checkpoint(model, path, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    meta = {"model": model.kind, "model_config": model_config(model)}
    if train_cfg is not None:
        meta["train_config"] = asdict(train_cfg)
    meta.update(extra or {})
    save_weights(model.state_dict(), path, meta)


def load_checkpoint(path):
    _, meta = read_weights(path)
    cfg = dict(meta["model_config"])
    model = build_model(meta["model"], cfg, use_ecg=cfg.get("use_ecg", True))
    load_weights(model, path)
    model.eval()
    return model, meta


def write_run(run_dir, model, cfg: TrainConfig, history: RunHistory, dataset: Dataset,
              extra: dict | None = None) -> Path:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"train_config": asdict(cfg), "model_config": model_config(model),
            "dataset": {"variant": dataset.variant, "config": dataset.config}}
    echo.update(extra or {})
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True))
    (out / "history.csv").write_text(history.to_csv())
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=1, sort_keys=True))
    save_checkpoint(model, out / "checkpoint", cfg)
    return out


# --- capacity check ---------------------------------------------------------

def overfit(model, data: SplitTensors, steps: int = 500, lr: float = 1e-3, target: float = 0.05,
            optimizer: str = "adam") -> list[float]:
    """Full-batch training until the train BCE drops below ``target``.

    Returns the per-step loss trace (the last entry is the first value under
    ``target``, or the value after ``steps`` updates).
    """
    opt = make_optimizer(model.parameters(), optimizer, lr)
    batch = data.batch(torch.arange(len(data)))
    model.train()
    trace = []
    for _ in range(steps):
        opt.zero_grad(set_to_none=True)
        loss = bce_loss(batch["y"], model(batch))
        trace.append(float(loss.detach()))
        if trace[-1] < target:
            break
        loss.backward()
        optimizer_step(opt)
    return trace
