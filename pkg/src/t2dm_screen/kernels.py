"""Differentiable building blocks shared by both fusion models.

Attention, pre-norm transformer blocks, an LSTM encoder, a bottleneck
residual CNN, the raw weight-file format and a central-difference gradient
checker. Tensors are batch-first throughout.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

WEIGHTS_VERSION = 1
THREADS_ENV = "T2DM_SCREEN_THREADS"


def set_determinism(seed: int, threads: int | None = None) -> None:
    """Seed every RNG and pin the intra-op thread count."""
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    torch.set_num_threads(threads)
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def sinusoidal_table(length: int, dim: int) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table.float()


def trunc_normal_(t: Tensor, std: float = 0.02) -> Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; ``key_mask`` (B, L) of 0/1 excludes keys.

    q, k, v are (B, H, L, dh). Returns (output, attention weights).
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        keep = key_mask.bool()
        if not keep.any(dim=-1).all():
            raise ValueError("attention over an all-masked sequence")
        scores = scores.masked_fill(~keep[:, None, None, :], float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    return attn @ v, attn


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        for lin in (self.qkv, self.proj):
            trunc_normal_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor, token_mask: Tensor | None = None) -> Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
            token_mask = None if token_mask is None else token_mask[None]
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out, _ = masked_attention(qkv[0], qkv[1], qkv[2], token_mask)
        out = self.proj(out.transpose(1, 2).reshape(b, n, d))
        return out[0] if squeeze else out


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)) with GELU."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, eps: float = 1e-5):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        for lin in (self.fc1, self.fc2):
            trunc_normal_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor, token_mask: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), token_mask)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def lstm_forward(seq: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> tuple[Tensor, Tensor]:
    """Explicit LSTM recurrences from a zero state (gate order i, f, g, o).

    ``seq`` is (T, f) or (B, T, f). Returns (all hidden states, final hidden).
    """
    squeeze = seq.dim() == 2
    if squeeze:
        seq = seq[None]
    b, t, _ = seq.shape
    if t == 0:
        raise ValueError("LSTM over an empty sequence")
    hidden = w_hh.shape[1]
    h = seq.new_zeros(b, hidden)
    c = seq.new_zeros(b, hidden)
    states = []
    for step in range(t):
        gates = seq[:, step] @ w_ih.T + b_ih + h @ w_hh.T + b_hh
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        states.append(h)
    out = torch.stack(states, dim=1)
    return (out[0], h[0]) if squeeze else (out, h)


class LSTMEncoder(nn.Module):
    """Single-layer LSTM; the final hidden state is the sequence embedding."""

    def __init__(self, in_features: int, hidden: int = 256):
        super().__init__()
        self.hidden = hidden
        self.lstm = nn.LSTM(in_features, hidden, batch_first=True)
        bound = 1.0 / math.sqrt(hidden)
        for name, p in self.lstm.named_parameters():
            nn.init.uniform_(p, -bound, bound)
        with torch.no_grad():
            self.lstm.bias_ih_l0[hidden : 2 * hidden] = 1.0
            self.lstm.bias_hh_l0[hidden : 2 * hidden] = 0.0

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-2] == 0:
            raise ValueError("LSTM over an empty sequence")
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        out, (h, _) = self.lstm(x)
        return (out[0], h[0, 0]) if squeeze else (out, h[0])

    def reference(self, x: Tensor) -> tuple[Tensor, Tensor]:
        m = self.lstm
        return lstm_forward(x, m.weight_ih_l0, m.weight_hh_l0, m.bias_ih_l0, m.bias_hh_l0)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        width = planes
        out = planes * self.expansion
        self.conv1 = nn.Conv2d(inplanes, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out)
        self.relu = nn.ReLU()
        self.downsample = None
        if stride != 1 or inplanes != out:
            self.downsample = nn.Sequential(
                nn.Conv2d(inplanes, out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out),
            )

    def forward(self, x: Tensor) -> Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return self.relu(y + identity)


@dataclass(frozen=True)
class CnnConfig:
    stem_width: int = 16
    planes: tuple[int, ...] = (16, 32)
    blocks: tuple[int, ...] = (1, 1)
    in_channels: int = 3

    @property
    def out_dim(self) -> int:
        return self.planes[-1] * Bottleneck.expansion

    @classmethod
    def resnet50(cls) -> "CnnConfig":
        return cls(stem_width=64, planes=(64, 128, 256, 512), blocks=(3, 4, 6, 3))


class ResidualCNN(nn.Module):
    """Stem -> bottleneck stages -> global average pool.

    Parameter names follow the common ResNet layout (``conv1``, ``bn1``,
    ``layer1.0.conv1`` ...) so full-scale weights map over by name.
    """

    def __init__(self, cfg: CnnConfig = CnnConfig()):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(cfg.in_channels, cfg.stem_width, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(cfg.stem_width)
        self.relu = nn.ReLU()
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        inplanes = cfg.stem_width
        for i, (planes, n) in enumerate(zip(cfg.planes, cfg.blocks)):
            layers = []
            for j in range(n):
                layers.append(Bottleneck(inplanes, planes, stride=2 if (j == 0 and i > 0) else 1))
                inplanes = planes * Bottleneck.expansion
            setattr(self, f"layer{i + 1}", nn.Sequential(*layers))
        self.n_stages = len(cfg.planes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def forward(self, x: Tensor) -> Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for i in range(self.n_stages):
            x = getattr(self, f"layer{i + 1}")(x)
        return x.mean(dim=(2, 3))


# --- weight files -----------------------------------------------------------

class WeightFileError(Exception):
    pass


_DTYPES = {"float32": (torch.float32, "<f4"), "int64": (torch.int64, "<i8")}


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_weights(state: dict[str, Tensor], path, meta: dict | None = None) -> None:
    """Write ``<path>.json`` (name, shape, dtype, offset) + ``<path>.bin`` blobs."""
    manifest_path, blob_path = _paths(path)
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in state.items():
            t = t.detach().cpu()
            dtype = "int64" if t.dtype == torch.int64 else "float32"
            arr = t.to(_DTYPES[dtype][0]).numpy().astype(_DTYPES[dtype][1], copy=False)
            buf = np.ascontiguousarray(arr).tobytes()
            fh.write(buf)
            entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset, "nbytes": len(buf)})
            offset += len(buf)
    manifest = {"version": WEIGHTS_VERSION, "total_bytes": offset, "entries": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_weights(path) -> tuple[dict[str, Tensor], dict]:
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    if manifest.get("version") != WEIGHTS_VERSION:
        raise WeightFileError(f"{manifest_path}: unsupported version {manifest.get('version')!r}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise WeightFileError(f"{blob_path}: expected {manifest['total_bytes']} bytes, found {len(blob)}")
    state = {}
    for e in manifest["entries"]:
        if e["dtype"] not in _DTYPES:
            raise WeightFileError(f"parameter {e['name']}: unknown dtype {e['dtype']!r}")
        tdtype, npdtype = _DTYPES[e["dtype"]]
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * np.dtype(npdtype).itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(blob):
            raise WeightFileError(f"parameter {e['name']}: byte length does not match shape {e['shape']}")
        arr = np.frombuffer(blob, dtype=npdtype, count=n, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(tdtype)
    return state, manifest.get("meta", {})


def load_weights(module: nn.Module, path, prefix: str = "") -> dict:
    """Load a weight file into ``module`` (optionally only keys under ``prefix``).

    Raises ``WeightFileError`` naming the first parameter that is missing,
    unexpected or of the wrong shape.
    """
    state, meta = read_weights(path)
    if prefix:
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    own = module.state_dict()
    for name in own:
        if name not in state:
            raise WeightFileError(f"parameter {name}: missing from weight file")
        if tuple(state[name].shape) != tuple(own[name].shape):
            raise WeightFileError(
                f"parameter {name}: shape {tuple(state[name].shape)} != expected {tuple(own[name].shape)}"
            )
    for name in state:
        if name not in own:
            raise WeightFileError(f"parameter {name}: not present in model")
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own})
    return meta


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int
    worst_index: int
    n_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    n_coords: int = 48,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare autograd gradients with central differences in float64.

    ``fn(*inputs)`` may return any shape; it is reduced to a scalar with a
    fixed random projection. A seeded subset of up to ``n_coords``
    coordinates per input is checked. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = list(inputs)
    with torch.no_grad():
        out0 = fn(*inputs)
    proj = torch.randn(out0.shape, generator=gen, dtype=torch.float64)

    def scalar() -> Tensor:
        return (fn(*inputs).to(torch.float64) * proj).sum()

    for t in inputs:
        t.grad = None
    scalar().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in inputs]

    worst = (0.0, -1, -1)
    total = 0
    for idx, t in enumerate(inputs):
        flat = t.data.view(-1)
        k = min(n_coords, flat.numel())
        coords = torch.randperm(flat.numel(), generator=gen)[:k]
        a_flat = analytic[idx].view(-1)
        for c in coords.tolist():
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + eps
                fp = scalar().item()
                flat[c] = orig - eps
                fm = scalar().item()
                flat[c] = orig
            num = (fp - fm) / (2 * eps)
            a = a_flat[c].item()
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            total += 1
            if rel > worst[0]:
                worst = (rel, idx, c)
    return GradCheckResult(worst[0], worst[1], worst[2], total)
