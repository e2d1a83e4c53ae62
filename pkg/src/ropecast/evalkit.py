"""Metrics and held-out evaluation on synthetic scenes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .flow import euler_sample_many
from .layout import Task
from .synthdata import PATTERNS, Dataset, Garment, make_task_example, pattern_cell, render_garment

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 7


def region_mse(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over pixels where ``mask`` is set (all channels)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:mask.ndim]:
        raise ValueError(f"mask shape {mask.shape} does not match image {pred.shape}")
    if not mask.any():
        raise ValueError("empty mask")
    diff = pred[mask] - truth[mask]
    return float(np.mean(diff * diff))


def ssim(pred: np.ndarray, truth: np.ndarray, data_range: float = 1.0, win_size: int = SSIM_WINDOW) -> float:
    """Mean SSIM with a uniform ``win_size`` window (valid region), averaged over channels.

    Local statistics use the unbiased covariance estimate over each window.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < win_size:
        raise ValueError(f"image {x.shape[:2]} smaller than SSIM window {win_size}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    n = win_size * win_size
    cov_norm = n / (n - 1)

    def local_mean(a):
        return sliding_window_view(a, (win_size, win_size), axis=(0, 1)).mean(axis=(-2, -1))

    scores = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        ux, uy = local_mean(a), local_mean(b)
        vx = cov_norm * (local_mean(a * a) - ux * ux)
        vy = cov_norm * (local_mean(b * b) - uy * uy)
        vxy = cov_norm * (local_mean(a * b) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def classify_pattern(image: np.ndarray, rect, garment: Garment) -> str:
    """Nearest pattern template (``garment``'s palette, rendered in ``rect``) by MSE."""
    top, left, bottom, right = rect
    crop = image[top:bottom, left:right]
    cell = pattern_cell(image.shape[:2])
    errors = []
    for pattern in PATTERNS:
        template = render_garment(Garment(pattern, garment.palette), crop.shape[:2], cell)
        errors.append(np.mean((crop - template) ** 2))
    return PATTERNS[int(np.argmin(errors))]


@dataclass
class TaskMetrics:
    background_mse: float
    edit_mse: float
    ssim_mean: float
    n: int
    pattern_accuracy: float | None = None


@dataclass
class EvalReport:
    tasks: dict[str, TaskMetrics]
    fingerprint: str
    seed: int
    steps: int
    flags: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["tasks"] = {k: TaskMetrics(**v) for k, v in d["tasks"].items()}
        return cls(**d)


def fingerprint(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_examples(model, examples, *, steps: int, seed: int, clean_latents: bool, adaptive: bool,
                    chunk: int = 16) -> list[np.ndarray]:
    """Generate images for a list of same-task ``TaskExample`` objects."""
    from .dit import velocity_fn

    fn = velocity_fn(model)
    patch = model.cfg.patch_size
    out = []
    for start in range(0, len(examples), chunk):
        part = examples[start:start + chunk]
        grids = euler_sample_many(
            fn, [(ex.task, ex.conditions) for ex in part], part[0].target.shape, steps,
            seeds=[(seed, start + i) for i in range(len(part))],
            clean_latents=clean_latents, adaptive=adaptive,
        )
        out.extend(np.clip(g.to_image(patch), 0.0, 1.0) for g in grids)
    return out


def evaluate(checkpoint, dataset: Dataset, tasks=(Task.TRYON,), *, steps: int = 20, seed: int = 0,
             limit: int | None = None) -> EvalReport:
    """Sample every (example, task) and score it against ground truth.

    ``checkpoint`` is a path or an already-loaded ``(model, meta)`` pair; the
    ablation flags stored in the checkpoint's training config decide how
    conditions are inserted during sampling.
    """
    from .checkpoint import load_model

    if isinstance(checkpoint, tuple):
        model, meta = checkpoint
    else:
        model, _, meta = load_model(checkpoint)
    train_cfg = meta.get("train_config", {})
    clean = bool(train_cfg.get("clean_latents", True))
    adaptive = bool(train_cfg.get("adaptive_position", True))
    model.eval()

    triples = dataset.triples[:limit] if limit else dataset.triples
    results = {}
    for task in tasks:
        task = Task(task)
        examples = [make_task_example(t, task, model.cfg.patch_size, model.cfg.task_token_count) for t in triples]
        images = sample_examples(model, examples, steps=steps, seed=seed, clean_latents=clean, adaptive=adaptive)
        bg, edit, ss, hits, scored = [], [], [], 0, 0
        for ex, img in zip(examples, images):
            bg.append(region_mse(img, ex.target_image, ~ex.edit_mask))
            edit.append(region_mse(img, ex.target_image, ex.edit_mask))
            ss.append(ssim(img, ex.target_image))
            if ex.garment is not None:
                scored += 1
                hits += classify_pattern(img, ex.garment_rect, ex.garment) == ex.garment.pattern
        results[task.value] = TaskMetrics(
            background_mse=float(np.mean(bg)),
            edit_mse=float(np.mean(edit)),
            ssim_mean=float(np.mean(ss)),
            n=len(examples),
            pattern_accuracy=hits / scored if scored else None,
        )
    return EvalReport(
        tasks=results,
        fingerprint=fingerprint(model.cfg.to_dict(), train_cfg),
        seed=seed,
        steps=steps,
        flags={"clean_latents": clean, "adaptive_position": adaptive},
    )
