"""Minimal Vision Transformer forward pass that captures every head's attention.

Pre-norm blocks (LayerNorm -> MHSA -> residual -> LayerNorm -> MLP(GELU) ->
residual), scaled dot-product attention, optional CLS token, no final norm.
Weights are seeded for desk-scale runs or loaded from a VSLT tensor file.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from keypatch import config
from keypatch.errors import CompletenessError, ConfigurationError, NumericError, TensorFormatError
from keypatch.imaging.image_core import RgbImage
from keypatch.model.tensor_file import META, decode_meta, encode_meta, load_tensor_file, save_tensor_file

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ROW_SUM_TOLERANCE = 1e-5
LAYER_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = config.VIT_IMAGE_SIZE
    patch_size: int = config.VIT_PATCH_SIZE
    layers: int = config.VIT_LAYERS
    heads: int = config.VIT_HEADS
    embed_dim: int = config.VIT_EMBED_DIM
    mlp_ratio: float = config.VIT_MLP_RATIO
    use_cls_token: bool = config.VIT_USE_CLS
    init_std: float = config.VIT_INIT_STD

    def __post_init__(self):
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.layers < 0:
            raise ConfigurationError(f"layers must be >= 0, got {self.layers}")
        if self.mlp_ratio <= 0:
            raise ConfigurationError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + (1 if self.use_cls_token else 0)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_meta(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_meta(cls, meta: Mapping[str, Any]) -> "ViTConfig":
        fields = {k: meta[k] for k in cls.__dataclass_fields__ if k in meta}
        try:
            return cls(**fields)
        except TypeError as e:
            raise ConfigurationError(f"invalid ViT config in meta: {e}") from e


@dataclass(frozen=True)
class AttentionRecord:
    layer: int
    head: int
    alpha: np.ndarray   # (T, T), rows are softmax distributions

    @property
    def n_tokens(self) -> int:
        return self.alpha.shape[0]


def check_attention(alpha: np.ndarray, layer: Optional[int] = None, tol: float = ROW_SUM_TOLERANCE) -> None:
    if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1]:
        raise NumericError(f"attention matrix must be square, got shape {alpha.shape}", layer=layer)
    if not np.all(np.isfinite(alpha)):
        raise NumericError("attention contains NaN/Inf", layer=layer)
    if np.any(alpha < 0):
        raise NumericError("attention contains negative weights", layer=layer)
    worst = float(np.max(np.abs(alpha.sum(axis=1, dtype=np.float64) - 1.0)))
    if worst > tol:
        raise NumericError(f"attention rows deviate from 1 by {worst:.3g}", layer=layer)


# --------- Modules ----------

class PatchEmbed(nn.Module):
    """Flattens each P x P x 3 patch (row, col, channel order) and projects it."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.grid_size = cfg.grid_size
        self.proj = nn.Linear(3 * cfg.patch_size ** 2, cfg.embed_dim)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        g, p = self.grid_size, self.patch_size
        patches = pixels.reshape(g, p, g, p, 3).permute(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        return self.proj(patches)


class Attention(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        d = cfg.embed_dim
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.scale = 1.0 / math.sqrt(cfg.head_dim)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.proj = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (T, d) -> (heads, T, head_dim)
        return x.reshape(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        logits = (q @ k.transpose(-2, -1)) * self.scale
        logits = logits - logits.amax(dim=-1, keepdim=True)
        weights = logits.exp()
        attn = weights / weights.sum(dim=-1, keepdim=True)
        out = (attn @ v).transpose(0, 1).reshape(x.shape[0], -1)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.mlp_dim)
        self.fc2 = nn.Linear(cfg.mlp_dim, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim, eps=LAYER_NORM_EPS)
        self.attn = Attention(cfg)
        self.norm2 = nn.LayerNorm(cfg.embed_dim, eps=LAYER_NORM_EPS)
        self.mlp = Mlp(cfg)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        attn_out, attn = self.attn(self.norm1(x))
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n_tokens, cfg.embed_dim))
        self.cls_token = nn.Parameter(torch.zeros(1, cfg.embed_dim)) if cfg.use_cls_token else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))

    def embed(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(pixels)
        if self.cls_token is not None:
            x = torch.cat([self.cls_token, x], dim=0)
        return x + self.pos_embed

    def forward(self, pixels: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        x = self.embed(pixels)
        attentions = []
        for block in self.blocks:
            x, attn = block(x)
            attentions.append(attn)
        return x, attentions


# --------- Weights ----------

def init_weights(model: VisionTransformer, seed: int) -> None:
    """Gaussian(0, init_std) for projections and embeddings, zero biases, unit norm scales."""
    gen = torch.Generator().manual_seed(seed)
    std = model.cfg.init_std
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith(".bias"):
                param.zero_()
            elif ".norm" in name:
                param.fill_(1.0)
            else:
                param.copy_(torch.randn(param.shape, generator=gen) * std)


def build_model(cfg: ViTConfig, seed: int = config.SEED,
                state: Optional[Mapping[str, np.ndarray]] = None) -> VisionTransformer:
    model = VisionTransformer(cfg)
    if state is None:
        init_weights(model, seed)
    else:
        try:
            model.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in state.items()})
        except RuntimeError as e:
            raise ConfigurationError(f"weights do not match ViT config: {e}") from e
    model.eval()
    return model


def save_weights(path: PathLike, model: VisionTransformer) -> None:
    tensors: Dict[str, np.ndarray] = {META: encode_meta({"kind": "weights", **model.cfg.to_meta()})}
    for name, param in model.state_dict().items():
        tensors[name] = param.detach().cpu().numpy()
    save_tensor_file(path, tensors)


def load_weights(path: PathLike) -> VisionTransformer:
    tensors = load_tensor_file(path)
    meta = decode_meta(tensors)
    if meta.get("kind") != "weights":
        raise TensorFormatError(f"{path} is not a weight bundle (kind={meta.get('kind')!r})")
    cfg = ViTConfig.from_meta(meta)
    state = {k: v for k, v in tensors.items() if k != META}
    logger.info("[VIT] loaded weights for %d layers x %d heads from %s", cfg.layers, cfg.heads, path)
    return build_model(cfg, state=state)


# --------- Forward pass ----------

def _pixels_tensor(img: RgbImage, cfg: ViTConfig) -> torch.Tensor:
    if img.width != cfg.image_size or img.height != cfg.image_size:
        raise ConfigurationError(
            f"image is {img.width}x{img.height}, model expects {cfg.image_size}x{cfg.image_size}"
        )
    return torch.from_numpy(np.ascontiguousarray(img.pixels, dtype=np.float32))


def _to_records(attn: torch.Tensor, layer: int) -> List[AttentionRecord]:
    alpha = attn.detach().cpu().numpy().astype(np.float32)
    records = []
    for head in range(alpha.shape[0]):
        check_attention(alpha[head], layer=layer)
        records.append(AttentionRecord(layer=layer, head=head, alpha=alpha[head].copy()))
    return records


@torch.no_grad()
def patch_embed(img: RgbImage, model: VisionTransformer) -> torch.Tensor:
    """(N, d) patch embeddings with their position embeddings, CLS excluded."""
    x = model.patch_embed(_pixels_tensor(img, model.cfg))
    offset = 1 if model.cfg.use_cls_token else 0
    return x + model.pos_embed[offset:]


@torch.no_grad()
def mhsa_forward(x: torch.Tensor, attention: Attention, layer: int = 0) -> Tuple[torch.Tensor, List[AttentionRecord]]:
    if not torch.isfinite(x).all():
        raise NumericError("non-finite input to self-attention", layer=layer)
    out, attn = attention(x)
    if not torch.isfinite(out).all():
        raise NumericError("non-finite self-attention output", layer=layer)
    return out, _to_records(attn, layer)


@torch.no_grad()
def forward_with_attention(img: RgbImage, model: VisionTransformer) -> Tuple[torch.Tensor, List[AttentionRecord]]:
    x = model.embed(_pixels_tensor(img, model.cfg))
    records: List[AttentionRecord] = []
    for layer, block in enumerate(model.blocks):
        if not torch.isfinite(x).all():
            raise NumericError("non-finite block input", layer=layer)
        x, attn = block(x)
        records.extend(_to_records(attn, layer))
    if not torch.isfinite(x).all():
        raise NumericError("non-finite final embeddings", layer=len(model.blocks))
    logger.debug("[VIT] forward pass captured %d attention records", len(records))
    return x, records


def jvp_check(block: Block, x: torch.Tensor, direction: torch.Tensor,
              eps: float = 1e-6) -> Tuple[torch.Tensor, torch.Tensor]:
    """Forward-mode JVP of a block's output and its central finite difference, both in float64."""
    block64 = copy.deepcopy(block).double()
    x64, v64 = x.double(), direction.double()

    def fn(inp: torch.Tensor) -> torch.Tensor:
        return block64(inp)[0]

    _, analytic = torch.func.jvp(fn, (x64,), (v64,))
    with torch.no_grad():
        numeric = (fn(x64 + eps * v64) - fn(x64 - eps * v64)) / (2.0 * eps)
    return analytic.detach(), numeric


# --------- Attention bundles ----------

def attention_name(layer: int, head: int) -> str:
    return f"attn/L{layer}/H{head}"


def bundle_meta(cfg: ViTConfig) -> Dict[str, Any]:
    return {
        "kind": "attention",
        "image_size": cfg.image_size,
        "patch_size": cfg.patch_size,
        "layers": cfg.layers,
        "heads": cfg.heads,
        "use_cls_token": cfg.use_cls_token,
    }


def export_attention_bundle(path: PathLike, records: Sequence[AttentionRecord], meta: Mapping[str, Any]) -> None:
    tensors: Dict[str, np.ndarray] = {META: encode_meta(meta)}
    for rec in sorted(records, key=lambda r: (r.layer, r.head)):
        tensors[attention_name(rec.layer, rec.head)] = rec.alpha
    save_tensor_file(path, tensors)


def load_attention_bundle(path: PathLike) -> Tuple[Dict[str, Any], List[AttentionRecord]]:
    tensors = load_tensor_file(path)
    meta = decode_meta(tensors)
    for key in ("image_size", "patch_size", "layers", "heads"):
        if not isinstance(meta.get(key), int):
            raise TensorFormatError(f"bundle meta lacks integer {key!r}")
    records = []
    for layer in range(meta["layers"]):
        for head in range(meta["heads"]):
            name = attention_name(layer, head)
            if name not in tensors:
                raise CompletenessError(f"{path}: missing attention record {name}")
            alpha = tensors[name]
            check_attention(alpha, layer=layer)
            records.append(AttentionRecord(layer=layer, head=head, alpha=alpha))
    logger.info("[VIT] loaded %d attention records from %s", len(records), path)
    return meta, records
