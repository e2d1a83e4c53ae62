"""Fast invariant suites run by ``ropecast selftest``."""

from __future__ import annotations

import tempfile
import traceback

import numpy as np
import torch


def suite_rope3d():
    from .rope3d import RopeConfig, apply_rope, make_frequencies

    cfg = RopeConfig(16)
    freqs = make_frequencies(cfg)
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, k = rng.standard_normal((2, 16))
        pos = rng.integers(0, 20, 3)
        shift = rng.integers(-5, 6, 3)
        assert abs(np.linalg.norm(apply_rope(q, pos, cfg, freqs)) - np.linalg.norm(q)) < 1e-10
        pos2 = rng.integers(0, 20, 3)
        a = apply_rope(q, pos, cfg, freqs) @ apply_rope(k, pos2, cfg, freqs)
        b = apply_rope(q, pos + shift, cfg, freqs) @ apply_rope(k, pos2 + shift, cfg, freqs)
        assert abs(a - b) < 1e-8
    assert np.array_equal(apply_rope(q, (0, 0, 0), cfg, freqs), q)


def suite_layout():
    from .layout import Segment, gather_target, scatter_target, task_layout, LatentGrid

    for task in ("tryon", "model_free_tryon", "garment_reconstruction", "tryon_in_layers"):
        seq = task_layout(task, (3, 4), channels=2)
        assert not np.any(seq.loss_mask & seq.clean_mask)
        assert np.all(seq.loss_mask | seq.clean_mask)
        assert np.all(seq.positions[seq.segment != Segment.CONDITION][:, 0] == 0)
        grid = LatentGrid(np.arange(24, dtype=float).reshape(3, 4, 2))
        assert np.array_equal(gather_target(scatter_target(seq, grid)).data, grid.data)


def suite_flow():
    from .flow import euler_sample, make_flow_sample
    from .layout import ConditionSpec, LatentGrid, TaskSpec

    rng = np.random.default_rng(0)
    x1 = LatentGrid(rng.standard_normal((2, 3, 4)))
    s0 = make_flow_sample(x1, rng, t=0.0)
    assert np.array_equal(s0.z_t.data, x1.data)
    cond = [ConditionSpec(LatentGrid(rng.standard_normal((2, 3, 4))), 1, True)]
    state = {}

    def oracle(seqs, t):
        seq = seqs[0]
        if "eps" not in state:
            state["eps"] = seq.values[seq.target_slice].copy()
        v = np.zeros_like(seq.values)
        v[seq.target_slice] = state["eps"] - x1.data.reshape(-1, 4)
        return [v]

    for n in (1, 7):
        state.clear()
        out = euler_sample(oracle, TaskSpec("tryon"), cond, x1.shape, steps=n, seed=3)
        assert np.max(np.abs(out.data - x1.data)) < 1e-6


def suite_dit():
    from .dit import DiT, ModelConfig, forward
    from .layout import task_layout

    cfg = ModelConfig(d_model=16, n_heads=2, depth=1, patch_size=1, in_channels=2, freq_dim=8)
    model = DiT(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    seq = task_layout("tryon", (2, 2), channels=2)
    a = forward(model, seq, 0.3)
    b = forward(model, seq, 0.3)
    assert torch.equal(a, b)
    _, attn = model(torch.zeros(1, len(seq), 2, dtype=torch.float64), seq.positions, seq.segment,
                    torch.tensor([0]), torch.tensor([0.3], dtype=torch.float64), return_attention=True)
    assert torch.allclose(attn[0].sum(-1), torch.ones(1, dtype=torch.float64), atol=1e-6)


def suite_synthdata():
    from .synthdata import SceneParams, check_triple, generate_triple

    for seed in range(16):
        a = generate_triple(SceneParams.random(seed))
        assert not check_triple(a), check_triple(a)
        b = generate_triple(SceneParams.random(seed))
        assert np.array_equal(a.target_image, b.target_image)


def suite_evalkit():
    from .evalkit import region_mse, ssim

    rng = np.random.default_rng(0)
    x, y = rng.random((2, 16, 16, 3))
    assert region_mse(x, x, np.ones((16, 16), bool)) == 0.0
    assert abs(ssim(x, x) - 1.0) < 1e-12
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-12


def suite_checkpoint():
    from . import checkpoint as ckpt

    tensors = {"a": torch.randn(3, 4), "b": torch.randn(2, dtype=torch.float64)}
    with tempfile.TemporaryDirectory() as d:
        ckpt.save(f"{d}/x.ckpt", {"k": 1}, tensors, {"step": 3})
        cfg, back, meta = ckpt.load(f"{d}/x.ckpt")
    assert cfg == {"k": 1} and meta == {"step": 3}
    assert all(torch.equal(tensors[k], back[k]) and tensors[k].dtype == back[k].dtype for k in tensors)


SUITES = {
    "rope3d": suite_rope3d,
    "token_layout": suite_layout,
    "flow_matching": suite_flow,
    "dit_core": suite_dit,
    "synthdata": suite_synthdata,
    "evalkit": suite_evalkit,
    "checkpoint": suite_checkpoint,
}


def run_all(out=print) -> bool:
    ok = True
    for name, fn in SUITES.items():
        try:
            fn()
            out(f"PASS {name}")
        except Exception:
            ok = False
            out(f"FAIL {name}")
            out(traceback.format_exc().rstrip())
    return ok
