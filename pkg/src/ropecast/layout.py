"""Sequence assembly: task tokens, condition latents and the noisy target.

Sequence order is ``[task | condition_1 | ... | condition_n | target]``,
each image flattened row-major. Every token gets a ``(w, y, x)`` position:

* task tokens sit at ``(0, 0, 0)``;
* condition ``i`` has ``w = i``; the target has ``w = 0``;
* all images share the row axis ``y = 0..m-1``;
* pixel-aligned conditions share the target's columns. When at least one
  aligned condition exists the target block starts at column 0 and the
  non-aligned conditions are stacked to its right; otherwise the non-aligned
  conditions are stacked from column 0 and the target follows them.

With ``adaptive=False`` (the ablation baseline) every condition is treated
as non-aligned and the id channel is dropped (``w = 0`` everywhere).
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np


class Task(str, enum.Enum):
    TRYON = "tryon"
    MODEL_FREE_TRYON = "model_free_tryon"
    GARMENT_RECONSTRUCTION = "garment_reconstruction"
    TRYON_IN_LAYERS = "tryon_in_layers"

    @property
    def index(self) -> int:
        return list(Task).index(self)


class Role(str, enum.Enum):
    MODEL_IMAGE = "model_image"
    GARMENT_IMAGE = "garment_image"


class Segment(enum.IntEnum):
    TASK = 0
    CONDITION = 1
    TARGET = 2


# (role, pixel_aligned) per condition slot, in sequence order
TASK_CONDITIONS: dict[Task, tuple[tuple[Role, bool], ...]] = {
    Task.TRYON: ((Role.MODEL_IMAGE, True), (Role.GARMENT_IMAGE, False)),
    Task.MODEL_FREE_TRYON: ((Role.GARMENT_IMAGE, False),),
    Task.GARMENT_RECONSTRUCTION: ((Role.MODEL_IMAGE, False),),
    Task.TRYON_IN_LAYERS: (
        (Role.MODEL_IMAGE, True),
        (Role.GARMENT_IMAGE, False),
        (Role.GARMENT_IMAGE, False),
    ),
}


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LatentGrid:
    """An ``(rows, cols, channels)`` token grid."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise LayoutError(f"latent grid must be (rows, cols, channels) with all dims >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise LayoutError("latent grid contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_image(cls, image: np.ndarray, patch_size: int) -> "LatentGrid":
        return cls(patchify(image, patch_size))

    def to_image(self, patch_size: int) -> np.ndarray:
        return unpatchify(self.data, patch_size)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) image -> (H/p, W/p, p*p*C) tokens, patch pixels row-major."""
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise LayoutError(f"image {h}x{w} not divisible by patch size {p}")
    x = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(h // p, w // p, p * p * c)


def unpatchify(tokens: np.ndarray, patch_size: int) -> np.ndarray:
    rows, cols, ch = tokens.shape
    p = patch_size
    c = ch // (p * p)
    if c * p * p != ch:
        raise LayoutError(f"{ch} channels is not a multiple of patch area {p * p}")
    x = tokens.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(rows * p, cols * p, c)


def resample_rows(grid: LatentGrid, rows: int) -> LatentGrid:
    """Nearest-neighbour resampling along the row axis."""
    if grid.height == rows:
        return grid
    src = np.floor((np.arange(rows) + 0.5) * grid.height / rows).astype(int)
    return LatentGrid(grid.data[np.clip(src, 0, grid.height - 1)])


@dataclass(frozen=True)
class ConditionSpec:
    grid: LatentGrid
    condition_id: int
    pixel_aligned: bool
    role: Role = Role.GARMENT_IMAGE


@dataclass(frozen=True)
class TaskSpec:
    task: Task
    task_token_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if self.task_token_count < 1:
            raise LayoutError(f"task_token_count must be >= 1, got {self.task_token_count}")


def _check_condition_ids(ids: list[int]) -> None:
    if len(set(ids)) != len(ids):
        raise LayoutError(f"duplicate condition ids: {ids}")
    if sorted(ids) != list(range(1, len(ids) + 1)):
        raise LayoutError(f"condition ids must be consecutive from 1, got {ids}")


def layout_positions(
    conditions: list[ConditionSpec],
    target_shape: tuple[int, int],
    *,
    adaptive: bool = True,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Positions for each condition block and for the target block.

    Returns ``(condition_positions, target_positions)``; each array has shape
    ``(rows * cols, 3)`` with columns ``(w, y, x)`` in row-major token order.
    """
    m, s = target_shape
    if m < 1 or s < 1:
        raise LayoutError(f"target shape must be positive, got {target_shape}")
    _check_condition_ids([c.condition_id for c in conditions])
    for c in conditions:
        if c.grid.height != m:
            raise LayoutError(
                f"condition {c.condition_id} has {c.grid.height} rows, target has {m}; resample first"
            )
        if adaptive and c.pixel_aligned and c.grid.width != s:
            raise LayoutError(
                f"pixel-aligned condition {c.condition_id} has width {c.grid.width}, target has {s}"
            )

    aligned = [adaptive and c.pixel_aligned for c in conditions]
    cursor = s if any(aligned) else 0
    blocks = []
    for c, is_aligned in zip(conditions, aligned):
        if is_aligned:
            start = 0
        else:
            start = cursor
            cursor += c.grid.width
        w = c.condition_id if adaptive else 0
        blocks.append(_block(w, m, c.grid.width, start))
    target_start = 0 if any(aligned) else cursor
    return blocks, _block(0, m, s, target_start)


def _block(w: int, rows: int, cols: int, col_start: int) -> np.ndarray:
    y, x = np.meshgrid(np.arange(rows), np.arange(cols) + col_start, indexing="ij")
    return np.stack([np.full(rows * cols, w), y.ravel(), x.ravel()], axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Assembled model input.

    ``values`` holds raw token features ``(L, C)``; task-token rows are zero
    and are replaced by learned embeddings inside the model.
    """

    values: np.ndarray
    positions: np.ndarray
    segment: np.ndarray
    loss_mask: np.ndarray
    clean_mask: np.ndarray
    task: Task
    target_shape: tuple[int, int]
    condition_shapes: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        for name in ("values", "positions", "segment", "loss_mask", "clean_mask"):
            arr = np.array(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def target_slice(self) -> slice:
        m, s = self.target_shape
        return slice(len(self) - m * s, len(self))

    @property
    def task_mask(self) -> np.ndarray:
        return self.segment == Segment.TASK

    @property
    def condition_mask(self) -> np.ndarray:
        return self.segment == Segment.CONDITION

    @property
    def target_mask(self) -> np.ndarray:
        return self.segment == Segment.TARGET

    def layout_key(self) -> tuple:
        """Sequences sharing this key can be stacked into one batch."""
        return (self.task, self.positions.tobytes(), self.segment.tobytes(),
                self.loss_mask.tobytes(), self.values.shape)


def assemble(
    task: TaskSpec,
    conditions: list[ConditionSpec],
    noisy_target: LatentGrid,
    *,
    adaptive: bool = True,
    clean_conditions: bool = True,
    resample: str | None = None,
) -> TokenSequence:
    """Concatenate task tokens, condition tokens and target tokens.

    ``clean_conditions=False`` marks condition tokens as noised: they join the
    loss mask instead of the clean mask (the caller supplies noised grids).
    ``resample="nearest"`` resamples conditions with a different row count to
    the target's rows; ``None`` rejects mismatches.
    """
    if resample not in (None, "nearest"):
        raise LayoutError(f"unknown resample policy {resample!r}")
    m, s, ch = noisy_target.shape
    fixed = []
    for c in conditions:
        if c.grid.channels != ch:
            raise LayoutError(f"condition {c.condition_id} has {c.grid.channels} channels, target has {ch}")
        if c.grid.height != m and resample == "nearest":
            c = dataclasses.replace(c, grid=resample_rows(c.grid, m))
        fixed.append(c)
    cond_pos, target_pos = layout_positions(fixed, (m, s), adaptive=adaptive)

    n_task = task.task_token_count
    parts = [np.zeros((n_task, ch))] + [c.grid.data.reshape(-1, ch) for c in fixed]
    parts.append(noisy_target.data.reshape(-1, ch))
    values = np.concatenate(parts, axis=0).astype(np.float64, copy=False)
    positions = np.concatenate([np.zeros((n_task, 3), dtype=np.int64), *cond_pos, target_pos])

    n_cond = sum(len(p) for p in cond_pos)
    segment = np.concatenate([
        np.full(n_task, Segment.TASK, dtype=np.int8),
        np.full(n_cond, Segment.CONDITION, dtype=np.int8),
        np.full(m * s, Segment.TARGET, dtype=np.int8),
    ])
    loss_mask = segment == Segment.TARGET
    if not clean_conditions:
        loss_mask = loss_mask | (segment == Segment.CONDITION)
    return TokenSequence(
        values=values,
        positions=positions,
        segment=segment,
        loss_mask=loss_mask,
        clean_mask=~loss_mask,
        task=task.task,
        target_shape=(m, s),
        condition_shapes=tuple((c.grid.height, c.grid.width) for c in fixed),
    )


def gather_target(seq: TokenSequence) -> LatentGrid:
    m, s = seq.target_shape
    return LatentGrid(seq.values[seq.target_slice].reshape(m, s, -1).copy())


def scatter_target(seq: TokenSequence, grid: LatentGrid) -> TokenSequence:
    m, s = seq.target_shape
    if grid.shape != (m, s, seq.values.shape[1]):
        raise LayoutError(f"grid shape {grid.shape} != target shape {(m, s, seq.values.shape[1])}")
    values = seq.values.copy()
    values[seq.target_slice] = grid.data.reshape(m * s, -1)
    return dataclasses.replace(seq, values=values)


def task_layout(task: Task | str, size: tuple[int, int], *, adaptive: bool = True,
                task_token_count: int = 1, channels: int = 1) -> TokenSequence:
    """Zero-valued sequence for ``task`` with every image a ``size`` token grid."""
    task = Task(task)
    grid = LatentGrid(np.zeros((*size, channels)))
    conditions = [
        ConditionSpec(grid, i + 1, aligned, role)
        for i, (role, aligned) in enumerate(TASK_CONDITIONS[task])
    ]
    return assemble(TaskSpec(task, task_token_count), conditions, grid, adaptive=adaptive)


def format_layout_table(seq: TokenSequence) -> str:
    """Plain-text ``index segment w y x`` table, one token per line."""
    lines = [f"{'index':>5} {'segment':<9} {'w':>2} {'y':>3} {'x':>3}"]
    for i, (seg, (w, y, x)) in enumerate(zip(seq.segment, seq.positions)):
        lines.append(f"{i:>5} {Segment(seg).name.lower():<9} {w:>2} {y:>3} {x:>3}")
    return "\n".join(lines) + "\n"
