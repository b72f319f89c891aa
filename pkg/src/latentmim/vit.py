"""Small Vision Transformer encoder that runs on the visible patch subset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from latentmim.config import ViTConfig
from latentmim.errors import ConfigError, NumericError
from latentmim.masking import MaskPlan


def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding, ``[grid * grid, dim]``, row-major grid order.

    Half the channels encode the row, half the column. Widths that are not a
    multiple of 4 are zero-padded.
    """
    padded = -(-dim // 4) * 4
    quarter = padded // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def one_axis(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    emb = np.concatenate([one_axis(rows), one_axis(cols)], axis=1)
    return emb[:, :dim].astype(np.float32)


def patchify_pixels(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """``[B, C, H, W]`` -> ``[B, N, p * p * C]``, patches in row-major order."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = torch.einsum("bchpwq->bhwpqc", x)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def check_images(images: torch.Tensor, image_size: int, patch_size: int) -> None:
    if images.ndim != 4:
        raise ConfigError(f"images must be [batch, 3, H, W], got {tuple(images.shape)}")
    _, c, h, w = images.shape
    if c != 3:
        raise ConfigError(f"channel axis has {c} channels, expected 3")
    if h != image_size:
        raise ConfigError(f"height axis is {h}, expected image_size {image_size}")
    if w != image_size:
        raise ConfigError(f"width axis is {w}, expected image_size {image_size}")
    if image_size % patch_size:
        raise ConfigError(f"image_size {image_size} is not divisible by patch_size {patch_size}")


@dataclass
class PatchSequence:
    tokens: torch.Tensor  # [B, N, D], positional embedding already added
    positions: np.ndarray  # [N, 2] (row, col)

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[1]


@dataclass
class LatentTokens:
    """Token features plus the patch index each row came from (-1 = class token)."""

    features: torch.Tensor  # [B, M, dim]
    index_map: torch.Tensor  # [B, M]

    @property
    def has_class_token(self) -> bool:
        return bool(self.index_map.shape[1]) and bool((self.index_map[:, 0] < 0).all())

    def patch_tokens(self) -> "LatentTokens":
        if self.has_class_token:
            return LatentTokens(self.features[:, 1:], self.index_map[:, 1:])
        return self


def grid_positions(grid: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.stack([rows, cols], axis=1)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic softmax(q k^T / sqrt(d_head)) over the last axis."""
    scale = q.shape[-1] ** -0.5
    return torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"dim {dim} is not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, h, n, d = x.shape
        return x.transpose(1, 2).reshape(b, n, h * d)

    def qkv_heads(self, x: torch.Tensor):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.split_heads(q), self.split_heads(k), self.split_heads(v)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        q, k, v = self.qkv_heads(x)
        attn = attention_weights(q, k)
        out = self.proj(self.merge_heads(attn @ v))
        if return_attn:
            return out, attn
        return out


def check_finite(x: torch.Tensor, what: str) -> None:
    bad = ~torch.isfinite(x)
    if bad.any():
        index = int(bad.reshape(bad.shape[0], -1).any(dim=1).nonzero()[0, 0])
        raise NumericError(f"non-finite values in {what} at batch index {index}")


def self_attention(x: torch.Tensor, attn: Attention, return_attn: bool = False):
    """Multi-head self-attention of ``x`` ``[B, M, dim]`` with the weights of ``attn``."""
    check_finite(x, "attention input")
    return attn(x, return_attn=return_attn)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, ffn_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(round(dim * ffn_ratio)))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ViTEncoder(nn.Module):
    def __init__(self, config: ViTConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        dim = config.embed_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Linear(3 * config.patch_size**2, dim)
            self.blocks = nn.ModuleList(
                Block(dim, config.num_heads, config.ffn_ratio) for _ in range(config.depth)
            )
            self.norm = nn.LayerNorm(dim)
            init_weights(self)
            if config.use_class_token:
                self.cls_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
            else:
                self.cls_token = None
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_pos_embed_2d(dim, config.grid_size)), persistent=False
        )

    def patchify(self, images: torch.Tensor) -> PatchSequence:
        cfg = self.config
        check_images(images, cfg.image_size, cfg.patch_size)
        patches = patchify_pixels(images, cfg.patch_size)
        tokens = self.patch_embed(patches) + self.pos_embed
        return PatchSequence(tokens, grid_positions(cfg.grid_size))

    def encode(self, seq: PatchSequence, keep: MaskPlan) -> LatentTokens:
        tokens = seq.tokens
        b, n, d = tokens.shape
        plan = keep.for_batch(b)
        if plan.num_patches != n:
            raise IndexError(f"mask plan covers {plan.num_patches} patches, sequence has {n}")
        idx = torch.from_numpy(plan.unmasked)
        if idx.numel() and (int(idx.max()) >= n or int(idx.min()) < 0):
            raise IndexError(f"mask plan references patch index {int(idx.max())} >= N = {n}")
        x = torch.gather(tokens, 1, idx.unsqueeze(-1).expand(-1, -1, d))
        index_map = idx
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
            index_map = torch.cat([torch.full((b, 1), -1, dtype=idx.dtype), idx], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return LatentTokens(self.norm(x), index_map)

    def forward(self, images: torch.Tensor, keep: MaskPlan | None = None) -> LatentTokens:
        seq = self.patchify(images)
        if keep is None:
            keep = MaskPlan.identity(seq.num_patches)
        return self.encode(seq, keep)


def encode(seq: PatchSequence, keep: MaskPlan, encoder: ViTEncoder) -> LatentTokens:
    return encoder.encode(seq, keep)


def patchify(images: torch.Tensor, encoder: ViTEncoder) -> PatchSequence:
    return encoder.patchify(images)
