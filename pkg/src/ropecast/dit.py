"""Minimal diffusion transformer over the mixed task/condition/target sequence.

Every block is adaLN-modulated self-attention + MLP. Queries and keys are
rotated with the three-axis RoPE of each token before scoring; attention is
full and bidirectional across all segments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .flow import TrainingBatch, masked_cfm_loss
from .layout import Segment, TokenSequence
from .rope3d import RopeConfig, RopeFrequencies, make_frequencies, rope_angles


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    depth: int = 2
    mlp_ratio: float = 4.0
    patch_size: int = 2
    in_channels: int = 3
    task_vocab_size: int = 4
    task_token_count: int = 1
    freq_dim: int = 64
    parallel_blocks: bool = False
    rope: RopeConfig | None = field(default=None)

    def __post_init__(self):
        for name in ("d_model", "n_heads", "patch_size", "in_channels", "task_vocab_size",
                     "task_token_count", "freq_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ValueError("depth must be >= 0 and mlp_ratio > 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim {self.head_dim} must be even")
        rope = self.rope
        if rope is None:
            rope = RopeConfig(self.head_dim)
        elif isinstance(rope, dict):
            split = rope.get("axis_split")
            rope = RopeConfig(rope.get("head_dim", self.head_dim), tuple(split) if split is not None else None,
                              rope.get("theta_base", 10000))
        if rope.head_dim != self.head_dim:
            raise ValueError(f"rope head_dim {rope.head_dim} != model head_dim {self.head_dim}")
        object.__setattr__(self, "rope", rope)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def token_channels(self) -> int:
        return self.patch_size ** 2 * self.in_channels

    def to_dict(self) -> dict:
        """Plain dict; ``rope`` is None when it is the default for this head size."""
        d = asdict(self)
        if self.rope == RopeConfig(self.head_dim):
            d["rope"] = None
        else:
            d["rope"]["axis_split"] = list(self.rope.axis_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``1000 * t``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, freq_dim: int, d_model: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, d_model), nn.SiLU(), nn.Linear(d_model, d_model))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_features(t, self.freq_dim))


def rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Interleaved rotation: pair ``(x[2j], x[2j+1])`` turns by the angle behind ``cos[j]``."""
    x = x.unflatten(-1, (-1, 2))
    x0, x1 = x[..., 0], x[..., 1]
    return torch.stack([x0 * cos - x1 * sin, x1 * cos + x0 * sin], dim=-1).flatten(-2)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, cos, sin, return_weights: bool = False):
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.n_heads, D // self.n_heads).permute(2, 0, 3, 1, 4)
        q = rotate_pairs(q, cos, sin)
        k = rotate_pairs(k, cos, sin)
        weights = None
        if return_weights:
            scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
            weights = scores.softmax(dim=-1)
            out = weights @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v)
        out = self.proj(out.transpose(1, 2).reshape(B, L, D))
        return out, weights


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.parallel = cfg.parallel_blocks
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, d))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))

    def forward(self, x, c, cos, sin, return_weights: bool = False):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        a, weights = self.attn(modulate(self.norm1(x), sh1, sc1), cos, sin, return_weights)
        if self.parallel:
            m = self.mlp(modulate(self.norm2(x), sh2, sc2))
            return x + g1[:, None] * a + g2[:, None] * m, weights
        x = x + g1[:, None] * a
        x = x + g2[:, None] * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x, weights


class FinalLayer(nn.Module):
    # no normalisation here: a depth-0 model stays affine in its input tokens
    def __init__(self, d_model: int, out_channels: int):
        super().__init__()
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 2 * d_model))
        self.out = nn.Linear(d_model, out_channels)

    def forward(self, x, c):
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.out(modulate(x, shift, scale))


class DiT(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = nn.Linear(cfg.token_channels, d)
        self.task_embed = nn.Parameter(torch.empty(cfg.task_vocab_size, cfg.task_token_count, d))
        self.t_embed = TimestepEmbedding(cfg.freq_dim, d)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.depth)])
        self.final = FinalLayer(d, cfg.token_channels)
        self._rope_cache: dict = {}
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(_trunc_normal(p.shape, 0.02, gen))
        self.final.out.weight.zero_()
        self.final.out.bias.zero_()

    def rope_tables(self, positions: np.ndarray, freqs: RopeFrequencies | None = None, dtype=torch.float32):
        key = (positions.tobytes(), positions.shape, None if freqs is None else freqs.concat().tobytes(), dtype)
        if key not in self._rope_cache:
            if len(self._rope_cache) > 64:
                self._rope_cache.clear()
            angles = rope_angles(positions, self.cfg.rope, freqs if freqs is not None else make_frequencies(self.cfg.rope))
            angles = torch.as_tensor(angles, dtype=torch.float64)
            self._rope_cache[key] = (angles.cos().to(dtype), angles.sin().to(dtype))
        return self._rope_cache[key]

    def forward(self, values: torch.Tensor, positions: np.ndarray, segment: np.ndarray, task_ids: torch.Tensor,
                t: torch.Tensor, freqs: RopeFrequencies | None = None, return_attention: bool = False):
        """Predict per-token velocities.

        values: (B, L, C) raw token features; positions: (L, 3) int; segment: (L,)
        task_ids: (B,) task index; t: (B,) times. Returns (B, L, C), plus the
        per-block attention weights when ``return_attention`` is set.
        """
        B, L, _ = values.shape
        x = self.in_proj(values)
        task_rows = np.flatnonzero(segment == Segment.TASK)
        if task_rows.size:
            emb = self.task_embed[task_ids]  # (B, n_task, D)
            if emb.shape[1] != task_rows.size:
                raise ValueError(f"sequence has {task_rows.size} task tokens, model expects {emb.shape[1]}")
            keep = torch.ones(L, 1, dtype=x.dtype)
            keep[torch.as_tensor(task_rows)] = 0
            x = x * keep + F.pad(emb, (0, 0, task_rows[0], L - task_rows[-1] - 1))
        c = self.t_embed(t.to(x.dtype))
        cos, sin = self.rope_tables(np.asarray(positions), freqs, x.dtype)
        attention = []
        for i, block in enumerate(self.blocks):
            x, w = block(x, c, cos, sin, return_attention)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activations after block {i}")
            attention.append(w)
        out = self.final(x, c)
        if not torch.isfinite(out).all():
            raise NonFiniteError("non-finite activations in output layer")
        return (out, attention) if return_attention else out


def _trunc_normal(shape, std: float, gen: torch.Generator) -> torch.Tensor:
    # resample outside +-2 std
    out = torch.randn(shape, generator=gen, dtype=torch.float64)
    bad = out.abs() > 2
    while bad.any():
        out[bad] = torch.randn(int(bad.sum()), generator=gen, dtype=torch.float64)
        bad = out.abs() > 2
    return out * std


def group_by_layout(seqs: Sequence[TokenSequence]) -> list[list[int]]:
    groups: dict = {}
    for i, s in enumerate(seqs):
        groups.setdefault(s.layout_key(), []).append(i)
    return list(groups.values())


def forward_sequences(model: DiT, seqs: Sequence[TokenSequence], t: Sequence[float],
                      freqs: RopeFrequencies | None = None) -> list[torch.Tensor]:
    """Per-sequence ``(L, C)`` predictions; same-layout sequences share one batched call."""
    dtype = next(model.parameters()).dtype
    preds: list = [None] * len(seqs)
    for idx in group_by_layout(seqs):
        first = seqs[idx[0]]
        values = torch.as_tensor(np.stack([seqs[i].values for i in idx]), dtype=dtype)
        task_ids = torch.as_tensor([seqs[i].task.index for i in idx])
        times = torch.as_tensor([t[i] for i in idx], dtype=dtype)
        out = model(values, first.positions, first.segment, task_ids, times, freqs)
        for j, i in enumerate(idx):
            preds[i] = out[j]
    return preds


def forward(model: DiT, seq: TokenSequence, t: float, freqs: RopeFrequencies | None = None) -> torch.Tensor:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return forward_sequences(model, [seq], [t], freqs)[0]


def batch_loss(model: DiT, batch: TrainingBatch) -> torch.Tensor:
    loss = masked_cfm_loss(forward_sequences(model, batch.sequences, batch.times), batch)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    return loss


def loss_and_gradients(model: DiT, batch: TrainingBatch) -> tuple[float, dict[str, torch.Tensor]]:
    """Masked flow-matching loss and its exact gradient for every parameter."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return loss.item(), grads


def velocity_fn(model: DiT):
    """Adapter for the Euler sampler: numpy in, numpy out, no autograd."""

    def fn(seqs, t):
        with torch.no_grad():
            return [p.double().numpy() for p in forward_sequences(model, seqs, t)]

    return fn
