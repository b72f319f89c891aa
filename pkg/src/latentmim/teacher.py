"""Frozen teacher: per-patch target features and class-token attention.

Any ViT with a class token can act as teacher. Targets are the final block's
patch-token outputs (after the final norm); the patch-importance vector comes
from the class token's attention in the last self-attention layer.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from latentmim.config import TeacherConfig, ViTConfig
from latentmim.errors import CheckpointFormatError, ConfigError, SchemaError, UnsupportedTeacherError
from latentmim.params import load_module_arrays, module_arrays, parameter_hash
from latentmim.tensorio import load_tensors, save_tensors
from latentmim.vit import Block, attention_weights, check_images, init_weights, patchify_pixels

PIXEL_VAR_FLOOR = 1e-6


@dataclass
class TargetBundle:
    targets: torch.Tensor  # [B, N, d_target]
    s_class: torch.Tensor  # [B, N], rows sum to 1
    teacher_id: str

    @property
    def d_target(self) -> int:
        return self.targets.shape[-1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.teacher_id.encode())
        h.update(self.targets.detach().contiguous().numpy().tobytes())
        h.update(self.s_class.detach().contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class TeacherState:
    """What one teacher pass exposes: patch features and last-layer query/keys."""

    patch_features: torch.Tensor  # [B, N, D]
    class_query: torch.Tensor | None  # [B, H, 1, d_head]
    keys: torch.Tensor | None  # [B, H, 1 + N, d_head]


class Teacher(nn.Module):
    """A ViT whose parameters are never trained."""

    def __init__(self, config: TeacherConfig, seed: int = 0, source: str = "stub"):
        super().__init__()
        config.validate()
        self.config = config
        self.source = source
        dim = config.embed_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Linear(3 * config.patch_size**2, dim)
            self.blocks = nn.ModuleList(
                Block(dim, config.num_heads, config.ffn_ratio) for _ in range(config.depth)
            )
            self.norm = nn.LayerNorm(dim)
            init_weights(self)
            self.cls_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02) if config.use_class_token else None
            pos = torch.randn(config.num_patches, dim) * 0.02
            self.pos_embed = nn.Parameter(pos if config.positional else torch.zeros_like(pos))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: always in eval mode
        return super().train(False)

    @property
    def teacher_id(self) -> str:
        c = self.config
        return (
            f"{self.source}:vit(p{c.patch_size},d{c.embed_dim},L{c.depth},h{c.num_heads})"
            f":final-block-patch-tokens:{parameter_hash(self)[:12]}"
        )

    @torch.no_grad()
    def run(self, images: torch.Tensor) -> TeacherState:
        cfg = self.config
        check_images(images, cfg.image_size, cfg.patch_size)
        x = self.patch_embed(patchify_pixels(images, cfg.patch_size)) + self.pos_embed
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        q_cls = keys = None
        for i, blk in enumerate(self.blocks):
            if i == len(self.blocks) - 1:
                q, k, _ = blk.attn.qkv_heads(blk.norm1(x))
                q_cls, keys = q[:, :, :1], k
            x = blk(x)
        x = self.norm(x)
        if self.cls_token is not None:
            x = x[:, 1:]
            return TeacherState(x, q_cls, keys)
        return TeacherState(x, None, None)


def class_attention(class_query: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Head-averaged class-token attention over patches, ``[B, N]``.

    ``class_query`` is ``[B, H, 1, d]`` and ``keys`` ``[B, H, 1 + N, d]`` with the
    class token first. The class token's own entry is dropped and the patch
    entries renormalized to sum to 1.
    """
    attn = attention_weights(class_query.double(), keys.double())  # [B, H, 1, 1+N]
    mean = attn.mean(dim=1)[:, 0]
    patches = mean[:, 1:]
    return (patches / patches.sum(dim=-1, keepdim=True)).float()


def extract_class_attention(state: TeacherState) -> torch.Tensor:
    if state.class_query is None or state.keys is None:
        raise UnsupportedTeacherError(
            "teacher has no class token or no self-attention layer; class attention is undefined"
        )
    return class_attention(state.class_query, state.keys)


def teacher_features(images: torch.Tensor, teacher: Teacher, student: ViTConfig | None = None) -> TargetBundle:
    """Targets and patch-importance vector for full, unmasked images."""
    tc = teacher.config
    if student is not None and (student.image_size, student.patch_size) != (tc.image_size, tc.patch_size):
        raise ConfigError(
            f"teacher grid ({tc.image_size}px / patch {tc.patch_size} -> {tc.grid_size}x{tc.grid_size}) "
            f"differs from student grid ({student.image_size}px / patch {student.patch_size} -> "
            f"{student.grid_size}x{student.grid_size})"
        )
    state = teacher.run(images)
    if state.class_query is not None:
        s_class = extract_class_attention(state)
    else:
        n = state.patch_features.shape[1]
        s_class = torch.full((images.shape[0], n), 1.0 / n)
    return TargetBundle(state.patch_features, s_class, teacher.teacher_id)


def pixel_targets(images: torch.Tensor, patch_size: int) -> TargetBundle:
    """Per-patch flattened pixels, normalized to zero mean and unit variance.

    The variance is floored at 1e-6, so constant patches map to zero vectors.
    """
    if images.shape[-1] % patch_size or images.shape[-2] % patch_size:
        raise ConfigError(f"image {tuple(images.shape[-2:])} is not divisible into {patch_size}px patches")
    # statistics in float64 so a constant patch centers to exact zeros
    patches = patchify_pixels(images, patch_size).double()
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, unbiased=False, keepdim=True).clamp_min(PIXEL_VAR_FLOOR)
    targets = ((patches - mean) / var.sqrt()).to(images.dtype)
    b, n, _ = targets.shape
    return TargetBundle(targets, torch.full((b, n), 1.0 / n), f"pixels:p{patch_size}:per-patch-norm")


def make_stub_teacher(seed: int, config: TeacherConfig) -> Teacher:
    """A seeded, randomly initialized frozen teacher.

    With ``config.saliency = a > 0`` the key projection of the last attention
    layer is tied to ``-a`` times the query projection, so the class token
    attends most to patches whose features point away from its own: rare,
    high-contrast content rather than the bulk of the image. A purely random
    teacher has no such preference.
    """
    teacher = Teacher(config, seed=seed, source=f"stub{seed}")
    if config.saliency > 0 and config.depth > 0:
        attn = teacher.blocks[-1].attn
        d = config.embed_dim
        with torch.no_grad():
            attn.qkv.weight[d : 2 * d] = -config.saliency * attn.qkv.weight[:d]
            attn.qkv.bias[d : 2 * d] = 0.0
    return teacher


def save_teacher(teacher: Teacher, path) -> None:
    meta = {"kind": "teacher", "config": dataclasses.asdict(teacher.config), "source": teacher.source}
    save_tensors(path, module_arrays(teacher), meta)


def load_teacher(path) -> Teacher:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {path}")
    arrays, meta = load_tensors(path)
    if meta.get("kind") != "teacher" or not isinstance(meta.get("config"), dict):
        raise CheckpointFormatError(f"{path} is not a teacher checkpoint (metadata kind={meta.get('kind')!r})")
    try:
        config = TeacherConfig(**meta["config"])
    except TypeError as exc:
        raise SchemaError(f"{path}: bad teacher config: {exc}") from None
    teacher = Teacher(config, source=meta.get("source", path.stem))
    load_module_arrays(teacher, arrays)
    return teacher
