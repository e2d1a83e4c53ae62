"""Rectified-flow training pairs, masked loss and the Euler sampler.

Convention: data at ``t = 0``, noise at ``t = 1``::

    z_t = (1 - t) * x1 + t * eps        u = eps - x1

Sampling integrates ``dz/dt = v`` from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .layout import ConditionSpec, LatentGrid, TaskSpec, TokenSequence, assemble

VelocityFn = Callable[[Sequence[TokenSequence], Sequence[float]], Sequence[np.ndarray]]


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowSample:
    t: float
    z_t: LatentGrid
    u_target: LatentGrid
    epsilon: LatentGrid


def element_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by ``(seed, *stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def sample_time(rng: np.random.Generator, distribution: str = "uniform") -> float:
    if distribution == "uniform":
        return float(rng.uniform(0.0, 1.0))
    if distribution == "logit_normal":
        return float(1.0 / (1.0 + np.exp(-rng.standard_normal())))
    raise ValueError(f"unknown timestep distribution {distribution!r}")


def interpolate(x1: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    return (1.0 - t) * x1 + t * eps


def make_flow_sample(x1: LatentGrid, rng: np.random.Generator, *, t: float | None = None,
                     t_distribution: str = "uniform") -> FlowSample:
    """Draw ``(t, eps)`` and build ``z_t`` and ``u``. ``t`` may be forced."""
    if t is None:
        t = sample_time(rng, t_distribution)
    eps = rng.standard_normal(x1.shape)
    return FlowSample(
        t=float(t),
        z_t=LatentGrid(interpolate(x1.data, eps, t)),
        u_target=LatentGrid(eps - x1.data),
        epsilon=LatentGrid(eps),
    )


@dataclass(frozen=True)
class BatchElement:
    task: TaskSpec
    conditions: tuple[ConditionSpec, ...]
    sample: FlowSample
    x1: LatentGrid
    sequence: TokenSequence
    velocity: np.ndarray  # (L, C) regression target; only loss_mask rows are meaningful


@dataclass(frozen=True)
class TrainingBatch:
    elements: tuple[BatchElement, ...]

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def sequences(self) -> list[TokenSequence]:
        return [e.sequence for e in self.elements]

    @property
    def times(self) -> list[float]:
        return [e.sample.t for e in self.elements]


def make_element(task: TaskSpec, conditions: Sequence[ConditionSpec], x1: LatentGrid,
                 rng: np.random.Generator, *, clean_latents: bool = True, adaptive: bool = True,
                 t: float | None = None, t_distribution: str = "uniform") -> BatchElement:
    sample = make_flow_sample(x1, rng, t=t, t_distribution=t_distribution)
    conds = list(conditions)
    cond_velocity = []
    if not clean_latents:
        noised = []
        for c in conds:
            eps_c = rng.standard_normal(c.grid.shape)
            noised.append(dataclasses.replace(c, grid=LatentGrid(interpolate(c.grid.data, eps_c, sample.t))))
            cond_velocity.append((eps_c - c.grid.data).reshape(-1, c.grid.channels))
        conds = noised
    seq = assemble(task, conds, sample.z_t, adaptive=adaptive, clean_conditions=clean_latents)

    velocity = np.zeros_like(seq.values)
    velocity[seq.target_slice] = sample.u_target.data.reshape(-1, x1.channels)
    if cond_velocity:
        velocity[seq.condition_mask] = np.concatenate(cond_velocity, axis=0)
    velocity.flags.writeable = False
    return BatchElement(task, tuple(conditions), sample, x1, seq, velocity)


def make_batch(examples: Sequence[tuple[TaskSpec, Sequence[ConditionSpec], LatentGrid]], seed: int,
               step: int = 0, *, clean_latents: bool = True, adaptive: bool = True,
               t_distribution: str = "uniform") -> TrainingBatch:
    """One flow sample per example; element ``i`` draws from stream ``(seed, step, i)``."""
    elements = []
    for i, (task, conditions, x1) in enumerate(examples):
        rng = element_rng(seed, step, i)
        elements.append(make_element(task, conditions, x1, rng, clean_latents=clean_latents,
                                     adaptive=adaptive, t_distribution=t_distribution))
    return TrainingBatch(tuple(elements))


def masked_cfm_loss(pred, batch: TrainingBatch):
    """Mean squared velocity error over loss-mask tokens and channels.

    ``pred`` is a sequence of per-element ``(L, C)`` arrays (numpy or torch).
    Only loss-mask rows are read, so other rows may hold anything.
    """
    if len(pred) != len(batch):
        raise ValueError(f"{len(pred)} predictions for {len(batch)} batch elements")
    sums = []
    count = 0
    for p, e in zip(pred, batch.elements):
        idx = np.flatnonzero(e.sequence.loss_mask)
        if idx.size == 0:
            raise ValueError("empty loss mask")
        target = e.velocity[idx]
        if _is_torch(p):
            import torch

            rows = p[torch.as_tensor(idx)]
            diff = rows - torch.as_tensor(target, dtype=rows.dtype)
        else:
            diff = np.asarray(p)[idx] - target
        sums.append((diff * diff).sum())
        count += diff.shape[0] * diff.shape[1]
    if _is_torch(sums[0]):
        import torch

        return torch.stack(sums).sum() / count
    total = 0.0
    for s in sums:
        total += float(s)
    return total / count


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def euler_sample_many(velocity_fn: VelocityFn, examples: Sequence[tuple[TaskSpec, Sequence[ConditionSpec]]],
                      target_shape: tuple[int, int, int], steps: int = 20, seeds: Sequence[int | tuple] = (0,), *,
                      clean_latents: bool = True, adaptive: bool = True,
                      on_step: Callable[[int, list[TokenSequence]], None] | None = None) -> list[LatentGrid]:
    """Integrate the target segment of every example from noise to data.

    Conditions are re-inserted at every step: clean, or (ablation) noised to
    the current ``t`` with a per-example noise draw fixed for the whole run.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if len(seeds) != len(examples):
        raise ValueError(f"{len(seeds)} seeds for {len(examples)} examples")
    rngs = [element_rng(*s) if isinstance(s, tuple) else element_rng(s) for s in seeds]
    z = [rng.standard_normal(target_shape) for rng in rngs]
    cond_eps = [[rng.standard_normal(c.grid.shape) for c in conds] for rng, (_, conds) in zip(rngs, examples)]
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        seqs = []
        for (task, conds), zi, eps_c in zip(examples, z, cond_eps):
            conds = list(conds)
            if not clean_latents:
                conds = [dataclasses.replace(c, grid=LatentGrid(interpolate(c.grid.data, e, t)))
                         for c, e in zip(conds, eps_c)]
            seqs.append(assemble(task, conds, LatentGrid(zi), adaptive=adaptive, clean_conditions=clean_latents))
        if on_step is not None:
            on_step(i, seqs)
        preds = velocity_fn(seqs, [t] * len(seqs))
        new_z = []
        for seq, zi, v in zip(seqs, z, preds):
            v_target = np.asarray(v)[seq.target_slice].reshape(zi.shape)
            zi = zi - dt * v_target
            if not np.all(np.isfinite(zi)):
                raise SamplerError(f"non-finite sampler state at step {i}")
            new_z.append(zi)
        z = new_z
    return [LatentGrid(zi) for zi in z]


def euler_sample(velocity_fn: VelocityFn, task: TaskSpec, conditions: Sequence[ConditionSpec],
                 target_shape: tuple[int, int, int], steps: int = 20, seed: int = 0, **kwargs) -> LatentGrid:
    return euler_sample_many(velocity_fn, [(task, conditions)], target_shape, steps, [seed], **kwargs)[0]

