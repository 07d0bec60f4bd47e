"""Early-fusion multimodal transformer and joint-fusion ResNet-LSTM."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
from torch import Tensor, nn

from .kernels import CnnConfig, LSTMEncoder, ResidualCNN, TransformerBlock, sinusoidal_table, trunc_normal_


class VariantMismatch(ValueError):
    """Batch modalities do not match the model's dataset variant."""


@dataclass
class ViltConfig:
    d_h: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 8
    image_side: int = 64
    ehr_len: int = 96
    ehr_features: int = 11
    ecg_len: int = 100
    ecg_features: int = 12
    use_ecg: bool = True
    learned_pos: bool = False
    pool: str = "first"  # "first" token or "cls_mean" over the modality CLS tokens
    layernorm_eps: float = 1e-5

    @classmethod
    def full_scale(cls, **kw) -> "ViltConfig":
        base = dict(d_h=768, layers=12, heads=12, patch=32, image_side=384)
        base.update(kw)
        return cls(**base)

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def n_tokens(self) -> int:
        n = (self.ehr_len + 1) + (self.n_patches + 1)
        return n + (self.ecg_len + 1 if self.use_ecg else 0)


@dataclass
class ResnetLstmConfig:
    hidden: int = 256
    ehr_features: int = 11
    ecg_features: int = 12
    image_side: int = 64
    use_ecg: bool = True
    cnn: CnnConfig = field(default_factory=CnnConfig)

    @property
    def embed_dim(self) -> int:
        return self.hidden * (2 if self.use_ecg else 1) + self.cnn.out_dim


class TabularEmbedding(nn.Module):
    """concat(CLS, X @ proj) + positional table + modality-type vector."""

    def __init__(self, n_features: int, length: int, dim: int, learned_pos: bool = False):
        super().__init__()
        self.n_features = n_features
        self.proj = nn.Parameter(trunc_normal_(torch.empty(n_features, dim)))
        self.cls = nn.Parameter(trunc_normal_(torch.empty(dim)))
        self.type_embed = nn.Parameter(trunc_normal_(torch.empty(dim)))
        if learned_pos:
            self.pos = nn.Parameter(trunc_normal_(torch.empty(length + 1, dim)))
        else:
            self.register_buffer("pos", sinusoidal_table(length + 1, dim))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        b = x.shape[0]
        tokens = torch.cat([self.cls.expand(b, 1, -1), x @ self.proj], dim=1)
        tokens = tokens + self.pos[: tokens.shape[1]].to(tokens.dtype) + self.type_embed
        return tokens, torch.ones(b, tokens.shape[1], dtype=torch.long)


class PatchEmbedding(nn.Module):
    """Non-overlapping p x p patches, flattened and linearly projected."""

    def __init__(self, side: int, patch: int, dim: int, channels: int = 3):
        super().__init__()
        if side % patch:
            raise ValueError(f"image side {side} not divisible by patch {patch}")
        self.patch = patch
        self.n_patches = (side // patch) ** 2
        self.proj = nn.Linear(channels * patch * patch, dim)
        trunc_normal_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.cls = nn.Parameter(trunc_normal_(torch.empty(dim)))
        self.pos = nn.Parameter(trunc_normal_(torch.empty(self.n_patches + 1, dim)))
        self.type_embed = nn.Parameter(trunc_normal_(torch.empty(dim)))

    def patches(self, img: Tensor) -> Tensor:
        b, c, h, w = img.shape
        p = self.patch
        x = img.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, img: Tensor) -> tuple[Tensor, Tensor]:
        b = img.shape[0]
        tokens = torch.cat([self.cls.expand(b, 1, -1), self.proj(self.patches(img))], dim=1)
        tokens = tokens + self.pos + self.type_embed
        return tokens, torch.ones(b, tokens.shape[1], dtype=torch.long)


class VisionTransformer(nn.Module):
    def __init__(self, cfg: ViltConfig):
        super().__init__()
        self.patch_embed = PatchEmbedding(cfg.image_side, cfg.patch, cfg.d_h)
        self.blocks = nn.ModuleList(
            [TransformerBlock(cfg.d_h, cfg.heads, cfg.mlp_ratio, cfg.layernorm_eps) for _ in range(cfg.layers)]
        )
        self.norm = nn.LayerNorm(cfg.d_h, eps=cfg.layernorm_eps)

    def encode(self, tokens: Tensor, mask: Tensor) -> Tensor:
        for blk in self.blocks:
            tokens = blk(tokens, mask)
        return self.norm(tokens)


def _check_variant(batch: dict, use_ecg: bool) -> None:
    has_g = batch.get("G") is not None
    if has_g != use_ecg:
        want = "E+C+G" if use_ecg else "E+C"
        raise VariantMismatch(f"model expects the {want} variant, batch {'has' if has_g else 'lacks'} ECG")


class ViltModel(nn.Module):
    """Single-stream transformer over EHR, CXR-patch and (optionally) ECG tokens."""

    kind = "vilt"

    def __init__(self, cfg: ViltConfig = ViltConfig()):
        super().__init__()
        self.cfg = cfg
        self.ehr_embed = TabularEmbedding(cfg.ehr_features, cfg.ehr_len, cfg.d_h, cfg.learned_pos)
        self.ecg_embed = (
            TabularEmbedding(cfg.ecg_features, cfg.ecg_len, cfg.d_h, cfg.learned_pos) if cfg.use_ecg else None
        )
        self.vit = VisionTransformer(cfg)
        self.head = nn.Linear(cfg.d_h, 1)
        trunc_normal_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def image_encoder(self) -> nn.Module:
        return self.vit

    def tokens(self, batch: dict) -> tuple[Tensor, Tensor]:
        _check_variant(batch, self.cfg.use_ecg)
        parts = [self.ehr_embed(batch["E"]), self.vit.patch_embed(batch["C"])]
        if self.ecg_embed is not None:
            parts.append(self.ecg_embed(batch["G"]))
        return torch.cat([p[0] for p in parts], dim=1), torch.cat([p[1] for p in parts], dim=1)

    def forward(self, batch: dict) -> Tensor:
        tokens, mask = self.tokens(batch)
        h = self.vit.encode(tokens, mask)
        if self.cfg.pool == "first":
            pooled = h[:, 0]
        elif self.cfg.pool == "cls_mean":
            idx = [0, self.cfg.ehr_len + 1]
            if self.cfg.use_ecg:
                idx.append(self.cfg.ehr_len + 1 + self.vit.patch_embed.n_patches + 1)
            pooled = h[:, idx].mean(dim=1)
        else:
            raise ValueError(f"unknown pooling {self.cfg.pool!r}")
        return torch.sigmoid(self.head(pooled)[:, 0])


class ResnetLstmModel(nn.Module):
    """Modality encoders whose embeddings are concatenated before one classifier.

    The auxiliary heads are only used while pre-training encoders in the
    early-training strategy.
    """

    kind = "resnet-lstm"

    def __init__(self, cfg: ResnetLstmConfig = ResnetLstmConfig()):
        super().__init__()
        self.cfg = cfg
        self.ehr_encoder = LSTMEncoder(cfg.ehr_features, cfg.hidden)
        self.ecg_encoder = LSTMEncoder(cfg.ecg_features, cfg.hidden) if cfg.use_ecg else None
        self.cxr_encoder = ResidualCNN(cfg.cnn)
        self.ehr_head = nn.Linear(cfg.hidden, 1)
        self.ecg_head = nn.Linear(cfg.hidden, 1) if cfg.use_ecg else None
        self.cxr_head = nn.Linear(cfg.cnn.out_dim, 1)
        self.classifier = nn.Linear(cfg.embed_dim, 1)

    def image_encoder(self) -> nn.Module:
        return self.cxr_encoder

    def encoders(self) -> dict[str, nn.Module]:
        enc = {"ehr": self.ehr_encoder, "cxr": self.cxr_encoder}
        if self.ecg_encoder is not None:
            enc["ecg"] = self.ecg_encoder
        return enc

    def heads(self) -> dict[str, nn.Module]:
        h = {"ehr": self.ehr_head, "cxr": self.cxr_head}
        if self.ecg_head is not None:
            h["ecg"] = self.ecg_head
        return h

    def embeddings(self, batch: dict) -> dict[str, Tensor]:
        _check_variant(batch, self.cfg.use_ecg)
        emb = {"ehr": self.ehr_encoder(batch["E"])[1], "cxr": self.cxr_encoder(batch["C"])}
        if self.ecg_encoder is not None:
            emb["ecg"] = self.ecg_encoder(batch["G"])[1]
        return emb

    def forward(self, batch: dict, use_aux_heads: bool = False):
        emb = self.embeddings(batch)
        if use_aux_heads:
            return {k: torch.sigmoid(self.heads()[k](v)[:, 0]) for k, v in emb.items()}
        order = ["ehr", "ecg", "cxr"] if self.cfg.use_ecg else ["ehr", "cxr"]
        z = torch.cat([emb[k] for k in order], dim=1)
        return torch.sigmoid(self.classifier(z)[:, 0])


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    d = dict(d)
    if cls is ResnetLstmConfig and isinstance(d.get("cnn"), dict):
        cnn = {k: tuple(v) if isinstance(v, list) else v for k, v in d["cnn"].items()}
        d["cnn"] = CnnConfig(**cnn)
    return cls(**d)


def build_model(kind: str, cfg: dict | None = None, use_ecg: bool = True) -> nn.Module:
    cfg = dict(cfg or {})
    cfg.setdefault("use_ecg", use_ecg)
    if kind == "vilt":
        return ViltModel(_from_dict(ViltConfig, cfg))
    if kind == "resnet-lstm":
        return ResnetLstmModel(_from_dict(ResnetLstmConfig, cfg))
    raise ValueError(f"unknown model kind {kind!r}")


def model_config(model: nn.Module) -> dict:
    return asdict(model.cfg)
