"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
import torch

from ropecast.dit import DiT, ModelConfig, batch_loss
from ropecast.flow import make_batch
from ropecast.layout import TASK_CONDITIONS, ConditionSpec, LatentGrid, Task, TaskSpec

MICRO = ModelConfig(d_model=8, n_heads=1, depth=1, mlp_ratio=2.0, patch_size=1, in_channels=2, freq_dim=8)


def randomized(model: DiT, std: float = 0.3, seed: int = 0) -> DiT:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(std * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


def micro_example(task, shape=(1, 3), channels=2, seed=0):
    task = Task(task)
    rng = np.random.default_rng(seed)
    conds = [
        ConditionSpec(LatentGrid(rng.random((*shape, channels))), i + 1, aligned, role)
        for i, (role, aligned) in enumerate(TASK_CONDITIONS[task])
    ]
    return TaskSpec(task), conds, LatentGrid(rng.random((*shape, channels)))


def micro_batch(seed=0, clean_latents=True):
    examples = [micro_example("tryon", seed=seed), micro_example("garment_reconstruction", seed=seed + 1)]
    return make_batch(examples, seed=seed, clean_latents=clean_latents)


def finite_difference_gradients(model: DiT, batch, h: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central differences of the batch loss, one parameter entry at a time."""
    grads = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = batch_loss(model, batch).item()
                flat[i] = orig - h
                down = batch_loss(model, batch).item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads[name] = g
    return grads


def relative_errors(analytic: dict, numeric: dict) -> dict[str, float]:
    out = {}
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(a.norm().item(), n.norm().item())
        out[name] = 0.0 if scale == 0 else (a - n).norm().item() / scale
    return out
