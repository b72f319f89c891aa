"""Decoders that turn encoder outputs plus mask tokens into per-patch predictions.

``prompting``: encoder outputs are fixed prompts. They are appended to the
keys and values of every attention layer but never updated; only mask tokens
are queries and only mask tokens go through the FFN.

``full``: the usual masked-autoencoder decoder, self-attention over all N
tokens.

``none``: no decoder; encoder outputs of the visible patches are projected
straight to the target width (distillation baseline).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from latentmim.config import DecoderConfig
from latentmim.errors import DimensionError, ReassemblyError
from latentmim.masking import MaskPlan
from latentmim.vit import Block, LatentTokens, Mlp, attention_weights, init_weights, sincos_pos_embed_2d


class PromptAttention(nn.Module):
    """Multi-head attention with mask-token queries and prompt rows prepended
    to the keys and values.

    With ``project_prompts=False`` the prompt rows enter keys and values as-is:
    ``softmax(X Wq [Z; X Wk]^T / sqrt(d_head)) [Z; X Wv] Wo``.
    """

    def __init__(self, dim: int, num_heads: int, project_prompts: bool = False):
        super().__init__()
        if dim % num_heads:
            raise DimensionError(f"dim {dim} is not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.project_prompts = project_prompts
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, z: torch.Tensor, return_attn: bool = False):
        if x.shape[-1] != z.shape[-1]:
            raise DimensionError(f"mask tokens have width {x.shape[-1]} but prompts have width {z.shape[-1]}")
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        if self.project_prompts:
            d = z.shape[-1]
            zk, zv = F.linear(z, self.qkv.weight[d:], self.qkv.bias[d:]).chunk(2, dim=-1)
        else:
            zk = zv = z
        q = self._heads(q)
        keys = torch.cat([self._heads(zk), self._heads(k)], dim=2)
        values = torch.cat([self._heads(zv), self._heads(v)], dim=2)
        attn = attention_weights(q, keys)
        out = attn @ values
        b, h, m, d = out.shape
        out = self.proj(out.transpose(1, 2).reshape(b, m, h * d))
        if return_attn:
            return out, attn
        return out


def prompting_mha(x: torch.Tensor, z: torch.Tensor, attn: PromptAttention) -> torch.Tensor:
    """Update mask tokens ``x`` ``[B, m, dim]`` given prompts ``z`` ``[B, k, dim]``."""
    return attn(x, z)


class PromptBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_ratio: float = 4.0, project_prompts: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = PromptAttention(dim, num_heads, project_prompts)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(round(dim * ffn_ratio)))

    def forward(self, x, z):
        x = x + self.attn(self.norm1(x), z)
        return x + self.mlp(self.norm2(x))


def gather_rows(x: torch.Tensor, index) -> torch.Tensor:
    index = torch.as_tensor(index, dtype=torch.long)
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


def reassemble(rows: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Reorder ``concat(unmasked, masked)`` rows back to patch order."""
    plan = plan.for_batch(rows.shape[0])
    if rows.shape[1] != plan.num_patches:
        raise ReassemblyError(f"{rows.shape[1]} rows for a plan over {plan.num_patches} patches")
    return gather_rows(rows, plan.restore_order)


class Decoder(nn.Module):
    def __init__(self, config: DecoderConfig, enc_dim: int, grid_size: int, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        dim = config.dec_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Linear(enc_dim, dim)
            if config.variant == "prompting":
                self.blocks = nn.ModuleList(
                    PromptBlock(dim, config.num_heads, config.ffn_ratio, config.project_prompts)
                    for _ in range(config.depth)
                )
            elif config.variant == "full":
                self.blocks = nn.ModuleList(
                    Block(dim, config.num_heads, config.ffn_ratio) for _ in range(config.depth)
                )
            else:
                self.blocks = nn.ModuleList()
            self.norm = nn.LayerNorm(dim)
            self.head = nn.Linear(dim, config.d_target)
            init_weights(self)
            self.mask_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_pos_embed_2d(dim, grid_size)), persistent=False
        )

    @property
    def num_patches(self) -> int:
        return self.pos_embed.shape[0]

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.norm(x))

    def _checked(self, latent: LatentTokens, plan: MaskPlan):
        latent = latent.patch_tokens()
        b = latent.features.shape[0]
        plan = plan.for_batch(b)
        if plan.num_patches != self.num_patches:
            raise ReassemblyError(f"plan covers {plan.num_patches} patches, decoder expects {self.num_patches}")
        if not torch.equal(latent.index_map, torch.from_numpy(plan.unmasked)):
            raise ReassemblyError("encoder tokens do not correspond to the plan's unmasked indices")
        return latent, plan

    def prompts(self, latent: LatentTokens, plan: MaskPlan) -> torch.Tensor:
        """Encoder outputs projected to decoder width plus positional embedding."""
        pos = self.pos_embed.expand(latent.features.shape[0], -1, -1)
        return self.embed(latent.features) + gather_rows(pos, plan.unmasked)

    def mask_tokens(self, plan: MaskPlan) -> torch.Tensor:
        b = plan.masked.shape[0]
        pos = gather_rows(self.pos_embed.expand(b, -1, -1), plan.masked)
        return self.mask_token + pos

    def decode_prompting(self, latent: LatentTokens, plan: MaskPlan, trace: list | None = None) -> torch.Tensor:
        """``[B, N, d_target]`` predictions in patch order.

        If ``trace`` is a list, the prompt tensor is appended to it before the
        first block and after every block.
        """
        latent, plan = self._checked(latent, plan)
        z = self.prompts(latent, plan)
        x = self.mask_tokens(plan)
        if trace is not None:
            trace.append(z.detach().clone())
        for blk in self.blocks:
            x = blk(x, z)
            if trace is not None:
                trace.append(z.detach().clone())
        rows = self.predict(torch.cat([z, x], dim=1))
        return reassemble(rows, plan)

    def decode_full(self, latent: LatentTokens, plan: MaskPlan) -> torch.Tensor:
        latent, plan = self._checked(latent, plan)
        b = latent.features.shape[0]
        visible = self.embed(latent.features)
        masked = self.mask_token.expand(b, plan.masked.shape[-1], -1)
        x = reassemble(torch.cat([visible, masked], dim=1), plan) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.predict(x)

    def decode_visible(self, latent: LatentTokens, plan: MaskPlan) -> torch.Tensor:
        """Predictions for the visible patches only, ``[B, K, d_target]``."""
        latent, plan = self._checked(latent, plan)
        return self.predict(self.prompts(latent, plan))

    def forward(self, latent: LatentTokens, plan: MaskPlan) -> torch.Tensor:
        variant = self.config.variant
        if variant == "prompting":
            return self.decode_prompting(latent, plan)
        if variant == "full":
            return self.decode_full(latent, plan)
        return self.decode_visible(latent, plan)


def decode_prompting(z: LatentTokens, plan: MaskPlan, decoder: Decoder) -> torch.Tensor:
    return decoder.decode_prompting(z, plan)


def decode_full(z: LatentTokens, plan: MaskPlan, decoder: Decoder) -> torch.Tensor:
    return decoder.decode_full(z, plan)
