"""Three-axis rotary position embedding.

Tokens carry a ``(w, y, x)`` coordinate: ``w`` is the image-condition id
(0 for the target and task tokens), ``y``/``x`` are token row/column. The
head dimension is split into three disjoint slices, one per axis, and each
slice is rotated pairwise by ``position * omega_m``.

Pairs are interleaved: ``(v0, v1), (v2, v3), ...`` share a frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

AXES = ("w", "y", "x")


def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    """(D/4, 3D/8, 3D/8) rounded to even sizes; rounding slack goes to ``w``."""
    if head_dim < 6 or head_dim % 2:
        raise ValueError(f"head_dim must be even and >= 6, got {head_dim}")
    d_spatial = max(2, 2 * ((3 * head_dim) // 16))
    return head_dim - 2 * d_spatial, d_spatial, d_spatial


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    axis_split: tuple[int, int, int] | None = None
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.axis_split is None:
            object.__setattr__(self, "axis_split", default_axis_split(self.head_dim))
        split = tuple(int(d) for d in self.axis_split)
        object.__setattr__(self, "axis_split", split)
        if len(split) != 3:
            raise ValueError(f"axis_split needs three entries, got {split}")
        for d in split:
            if d < 2 or d % 2:
                raise ValueError(f"axis dims must be even and >= 2, got {split}")
        if sum(split) != self.head_dim:
            raise ValueError(f"axis_split {split} does not sum to head_dim {self.head_dim}")
        if not self.theta_base > 0:
            raise ValueError(f"theta_base must be positive, got {self.theta_base}")

    @property
    def offsets(self) -> tuple[int, int, int]:
        d_w, d_y, _ = self.axis_split
        return 0, d_w, d_w + d_y


class RopeFrequencies(NamedTuple):
    """Per-axis frequency vectors, each of length ``d_axis / 2``."""

    w: np.ndarray
    y: np.ndarray
    x: np.ndarray

    def zeros(self) -> "RopeFrequencies":
        # test hook: every rotation becomes the identity
        return RopeFrequencies(*(np.zeros_like(f) for f in self))

    def concat(self) -> np.ndarray:
        return np.concatenate(list(self))


def axis_frequencies(d_axis: int, theta_base: float = 10000.0) -> np.ndarray:
    """``omega_m = theta_base ** (-2m / d_axis)`` for ``m in [0, d_axis/2)``."""
    if d_axis <= 0 or d_axis % 2:
        raise ValueError(f"axis dim must be even and positive, got {d_axis}")
    m = np.arange(d_axis // 2, dtype=np.float64)
    return 1.0 / theta_base ** (2.0 * m / d_axis)


def make_frequencies(cfg: RopeConfig) -> RopeFrequencies:
    return RopeFrequencies(*(axis_frequencies(d, cfg.theta_base) for d in cfg.axis_split))


def rotate_axis(v, p: float, freqs: np.ndarray) -> np.ndarray:
    """Rotate each interleaved pair of ``v`` by ``p * freqs[m]``."""
    v = np.asarray(v, dtype=np.float64)
    freqs = np.asarray(freqs, dtype=np.float64)
    if v.shape[-1] != 2 * freqs.shape[0]:
        raise ValueError(f"vector length {v.shape[-1]} != 2 * {freqs.shape[0]} frequencies")
    angle = p * freqs
    cos = np.repeat(np.cos(angle), 2)
    sin = np.repeat(np.sin(angle), 2)
    swapped = np.empty_like(v)
    swapped[..., 0::2] = -v[..., 1::2]
    swapped[..., 1::2] = v[..., 0::2]
    return v * cos + swapped * sin


def apply_rope(v, pos: Sequence[float], cfg: RopeConfig, freqs: RopeFrequencies | None = None) -> np.ndarray:
    """Rotate the (w | y | x) slices of ``v`` by the matching coordinate of ``pos``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector length {v.shape[-1]} != head_dim {cfg.head_dim}")
    if len(pos) != 3:
        raise ValueError(f"position must be a (w, y, x) triple, got {pos!r}")
    if freqs is None:
        freqs = make_frequencies(cfg)
    out = []
    for start, d, p, f in zip(cfg.offsets, cfg.axis_split, pos, freqs):
        out.append(rotate_axis(v[..., start:start + d], p, f))
    return np.concatenate(out, axis=-1)


def rope_angles(positions, cfg: RopeConfig, freqs: RopeFrequencies | None = None) -> np.ndarray:
    """Per-token rotation angles, shape ``(L, head_dim / 2)``, in pair order.

    Row ``i`` holds ``[w_i * omega_w, y_i * omega_y, x_i * omega_x]`` so that
    pair ``j`` of a head vector is rotated by ``angles[i, j]``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"positions must have shape (L, 3), got {positions.shape}")
    if freqs is None:
        freqs = make_frequencies(cfg)
    return np.concatenate([np.outer(positions[:, a], f) for a, f in enumerate(freqs)], axis=1)


def rotation_table(cfg: RopeConfig, max_pos: int) -> list[tuple[str, int, int, float, float, float]]:
    """Rows of (axis, pair, position, omega, cos, sin) for ``inspect-rope``."""
    freqs = make_frequencies(cfg)
    rows = []
    for name, f in zip(AXES, freqs):
        for m, omega in enumerate(f):
            for p in range(max_pos + 1):
                rows.append((name, m, p, float(omega), float(np.cos(p * omega)), float(np.sin(p * omega))))
    return rows
