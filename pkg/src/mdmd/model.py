"""ViT encoder, semantic-group decoder and dataset-routed regression heads."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schema import SchemaSet, flatten_ids

INIT_STD = 0.02


def default_dtype() -> torch.dtype:
    precision = os.environ.get("MDMD_PRECISION", "single").lower()
    if precision not in ("single", "double"):
        raise ValueError(f"MDMD_PRECISION must be 'single' or 'double', got {precision!r}")
    return torch.float64 if precision == "double" else torch.float32


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    encoder_layers: int = 12
    encoder_heads: int = 12
    decoder_blocks: int = 3
    decoder_heads: int | None = None
    ffn_ratio: int = 4
    # Conventional residual around the decoder FFN; off to keep the printed block equations.
    ffn_residual: bool = False
    # Extra ReLU in front of each head's first layer.
    head_pre_relu: bool = False

    def __post_init__(self):
        if self.decoder_heads is None:
            self.decoder_heads = self.encoder_heads
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for heads in (self.encoder_heads, self.decoder_heads):
            if heads < 1 or self.embed_dim % heads:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by head count {heads}")
        if self.embed_dim < 4:
            raise ValueError("embed_dim must be at least 4")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid**2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PredictionSet:
    """Per-landmark means (..., N, 2) and raw Cholesky parameters (..., N, 3) in canonical order."""

    landmarks: torch.Tensor
    cholesky_raw: torch.Tensor


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, query, context=None, return_weights: bool = False):
        context = query if context is None else context
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        weights = torch.softmax((q @ k.transpose(-1, -2)) * self.scale, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(query.shape)
        out = self.out(mixed)
        return (out, weights) if return_weights else out


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, ratio: int):
        super().__init__(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, x, return_weights: bool = False):
        h, w = self.attn(self.norm1(x), return_weights=True)
        x = x + h
        x = x + self.ffn(self.norm2(x))
        return (x, w) if return_weights else x


class DecoderBlock(nn.Module):
    """Cross-attention from group tokens to image tokens, then self-attention, then FFN."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int, ffn_residual: bool = False):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross = Attention(dim, heads)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)
        self.ffn_residual = ffn_residual

    def forward(self, f_in, x_out, return_weights: bool = False):
        h, cross_w = self.cross(self.norm_q(f_in), self.norm_kv(x_out), return_weights=True)
        f1 = h + f_in
        h, self_w = self.self_attn(self.norm_self(f1), return_weights=True)
        f2 = h + f1
        f_out = self.ffn(self.norm_ffn(f2))
        if self.ffn_residual:
            f_out = f_out + f2
        return (f_out, cross_w, self_w) if return_weights else f_out


def _head(dim: int, out: int, pre_relu: bool) -> nn.Sequential:
    layers = [nn.ReLU()] if pre_relu else []
    layers += [nn.Linear(dim, dim // 4), nn.ReLU(), nn.Linear(dim // 4, out)]
    return nn.Sequential(*layers)


class HeadPair(nn.Module):
    def __init__(self, dim: int, n: int, pre_relu: bool = False):
        super().__init__()
        self.n = n
        self.lm = _head(dim, 2 * n, pre_relu)
        self.chol = _head(dim, 3 * n, pre_relu)

    def forward(self, token):
        lead = token.shape[:-1]
        return self.lm(token).view(*lead, self.n, 2), self.chol(token).view(*lead, self.n, 3)


class MdmdModel(nn.Module):
    def __init__(
        self,
        config: ModelConfig,
        schema_set: SchemaSet,
        seed: int = 0,
        dtype: torch.dtype | None = None,
    ):
        super().__init__()
        self.config = config
        self.schema_set = schema_set
        d = config.embed_dim
        p = config.patch_size

        self.patch_proj = nn.Linear(p * p * 3, d)
        self.global_token = nn.Parameter(torch.zeros(1, d))
        self.pos_embed = nn.Parameter(torch.zeros(config.token_count, d))
        self.encoder = nn.ModuleList(
            EncoderBlock(d, config.encoder_heads, config.ffn_ratio) for _ in range(config.encoder_layers)
        )
        self.flsg_embed = nn.Parameter(torch.zeros(schema_set.group_count, d))
        self.decoder = nn.ModuleList(
            DecoderBlock(d, config.decoder_heads, config.ffn_ratio, config.ffn_residual)
            for _ in range(config.decoder_blocks)
        )
        # heads[j][str(i)] exists only for non-empty group i of dataset j
        self.heads = nn.ModuleList(
            nn.ModuleDict(
                {str(i): HeadPair(d, len(g), config.head_pre_relu) for i, g in enumerate(s.groups) if g}
            )
            for s in schema_set.schemas
        )
        self._gather = [
            torch.as_tensor(np.argsort(flatten_ids(s.groups)), dtype=torch.long) for s in schema_set.schemas
        ]
        self.reset_parameters(seed)
        self.to(dtype or default_dtype())

    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.endswith(".bias"):
                    param.zero_()
                elif ".norm" in name or name.startswith("norm"):
                    param.fill_(1.0)
                else:
                    nn.init.trunc_normal_(param, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_embed.dtype

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) images -> (B, P*P + 1, D) tokens, global token last."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {tuple(images.shape)}"
            )
        b, p, g = images.shape[0], cfg.patch_size, cfg.grid
        patches = images.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
        tokens = self.patch_proj(patches)
        glob = self.global_token.expand(b, 1, -1)
        return torch.cat([tokens, glob], dim=1) + self.pos_embed

    def encode(self, tokens: torch.Tensor, return_weights: bool = False):
        weights = []
        x = tokens
        for block in self.encoder:
            x, w = block(x, return_weights=True)
            weights.append(w)
        return (x, weights) if return_weights else x

    def decode(self, x_out: torch.Tensor, return_weights: bool = False):
        f = self.flsg_embed.expand(x_out.shape[0], -1, -1)
        weights = []
        for block in self.decoder:
            f, cross_w, self_w = block(f, x_out, return_weights=True)
            weights.append((cross_w, self_w))
        return (f, weights) if return_weights else f

    def predict_heads(self, f_out: torch.Tensor, dataset_id: int) -> PredictionSet:
        if not 0 <= dataset_id < len(self.heads):
            raise KeyError(f"unknown dataset id {dataset_id}")
        lms, chols = [], []
        for key, head in self.heads[dataset_id].items():
            lm, chol = head(f_out[:, int(key)])
            lms.append(lm)
            chols.append(chol)
        order = self._gather[dataset_id]
        return PredictionSet(torch.cat(lms, dim=1)[:, order], torch.cat(chols, dim=1)[:, order])

    def forward(self, images: torch.Tensor, dataset_id: int) -> PredictionSet:
        single = images.ndim == 3
        if single:
            images = images.unsqueeze(0)
        pred = self.predict_heads(self.decode(self.encode(self.patchify(images))), dataset_id)
        if single:
            pred = PredictionSet(pred.landmarks[0], pred.cholesky_raw[0])
        return pred

    def head_parameters(self, dataset_id: int):
        return list(self.heads[dataset_id].parameters())

    def trunk_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("heads.")]


def import_encoder_weights(model: MdmdModel, tensors: Mapping[str, np.ndarray], layout: str = "mdmd") -> list[str]:
    """Copy pretrained encoder tensors into ``model``; returns the names that were loaded.

    ``layout="mdmd"`` expects this package's own parameter names.  ``layout="timm"``
    translates the common ViT naming (``patch_embed.proj``, ``cls_token``,
    ``blocks.{i}.attn.qkv`` ...), moving the class token from first to last position.
    """
    if layout == "timm":
        tensors = _translate_timm(tensors, model.config)
    elif layout != "mdmd":
        raise ValueError(f"unknown layout {layout!r}")
    own = dict(model.named_parameters())
    loaded = []
    with torch.no_grad():
        for name, value in tensors.items():
            if not (name.startswith(("patch_proj.", "encoder.")) or name in ("global_token", "pos_embed")):
                continue
            if name not in own:
                raise KeyError(f"no encoder parameter named {name!r}")
            value = torch.as_tensor(np.asarray(value), dtype=model.dtype)
            if value.shape != own[name].shape:
                raise ValueError(f"{name}: shape {tuple(value.shape)} != {tuple(own[name].shape)}")
            own[name].copy_(value)
            loaded.append(name)
    return loaded


def _translate_timm(src: Mapping[str, np.ndarray], cfg: ModelConfig) -> dict[str, np.ndarray]:
    src = {k: np.asarray(v) for k, v in src.items()}
    d, p = cfg.embed_dim, cfg.patch_size
    out = {}
    w = src["patch_embed.proj.weight"]  # (D, 3, p, p)
    out["patch_proj.weight"] = w.transpose(0, 2, 3, 1).reshape(d, p * p * 3)
    out["patch_proj.bias"] = src["patch_embed.proj.bias"]
    out["global_token"] = src["cls_token"].reshape(1, d)
    pos = src["pos_embed"].reshape(-1, d)
    out["pos_embed"] = np.concatenate([pos[1:], pos[:1]], axis=0)
    for i in range(cfg.encoder_layers):
        s, t = f"blocks.{i}.", f"encoder.{i}."
        for a, b in (("norm1", "norm1"), ("norm2", "norm2"), ("attn.proj", "attn.out"),
                     ("mlp.fc1", "ffn.0"), ("mlp.fc2", "ffn.2")):
            out[t + b + ".weight"] = src[s + a + ".weight"]
            out[t + b + ".bias"] = src[s + a + ".bias"]
        qkv_w, qkv_b = src[s + "attn.qkv.weight"], src[s + "attn.qkv.bias"]
        for j, name in enumerate("qkv"):
            out[t + f"attn.{name}.weight"] = qkv_w[j * d:(j + 1) * d]
            out[t + f"attn.{name}.bias"] = qkv_b[j * d:(j + 1) * d]
    return out
