"""Procedural try-on scenes with exact ground truth.

A scene is a flat-colour figure (head + body) on a solid background with a
garment rectangle on the torso. Garments are ``solid``, ``stripes`` or
``checker`` patterns over a two-colour palette, rendered in garment-local
coordinates so that the flat garment image and the worn garment differ by a
pure translation.

All colours are multiples of 1/255, so images survive 8-bit PNG round trips
bit-exactly. Randomness comes from ``numpy.random.PCG64`` seeded through
``SeedSequence``; the same seed gives the same scene on every platform.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_bytes
from .layout import TASK_CONDITIONS, ConditionSpec, LatentGrid, Task, TaskSpec

PATTERNS = ("solid", "stripes", "checker")
WHITE = (1.0, 1.0, 1.0)
MIN_COLOR_DISTANCE = 0.2
_LEVELS = np.arange(0, 256, 17) / 255.0  # 16 levels per channel

CANONICAL_BACKGROUND = (136 / 255, 136 / 255, 136 / 255)
CANONICAL_BODY = (221 / 255, 170 / 255, 136 / 255)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_VERSION = 1
IMAGE_FIELDS = ("model_image", "garment_image", "target_image", "layer_garment_image", "layered_target",
                "canonical_target")
MASK_FIELDS = ("edit_region", "garment_region", "canonical_region")


class SceneError(ValueError):
    pass


Rect = tuple[int, int, int, int]  # top, left, bottom, right (exclusive)


@dataclass(frozen=True)
class Garment:
    pattern: str
    palette: tuple[tuple[float, float, float], tuple[float, float, float]]

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise SceneError(f"unknown pattern {self.pattern!r}")


@dataclass(frozen=True)
class SceneParams:
    seed: int
    canvas: tuple[int, int]
    background: tuple[float, float, float]
    body_color: tuple[float, float, float]
    head_rect: Rect
    body_rect: Rect
    torso_rect: Rect
    garment_a: Garment
    garment_b: Garment
    garment_c: Garment

    def validate(self) -> None:
        h, w = self.canvas
        for name in ("head_rect", "body_rect", "torso_rect"):
            top, left, bottom, right = getattr(self, name)
            if not (0 <= top < bottom <= h and 0 <= left < right <= w):
                raise SceneError(f"{name} {getattr(self, name)} outside canvas {self.canvas}")
        tt, tl, tb, tr = self.torso_rect
        if tb - tt < 2:
            raise SceneError("torso must be at least two rows tall")
        for g in (self.garment_a, self.garment_b, self.garment_c):
            if color_distance(*g.palette) < MIN_COLOR_DISTANCE:
                raise SceneError(f"garment palette {g.palette} not distinguishable")

    @classmethod
    def random(cls, seed: int, size: int = 32) -> "SceneParams":
        if size < 16 or size % 8:
            raise SceneError(f"canvas size must be a multiple of 8 and >= 16, got {size}")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
        g = grid_step((size, size))
        cells = size // g
        background = _color(rng)
        body = _color(rng, avoid=[background])
        body_w = int(rng.integers(6, 9))
        body_left = int(rng.integers(2, cells - body_w - 2 + 1))
        body_top = int(rng.integers(5, 7))
        head_w = max(1, body_w // 2)
        head_left = body_left + (body_w - head_w) // 2
        torso_h = int(rng.integers(5, 8))
        body_rect = (body_top * g, body_left * g, (cells - 1) * g, (body_left + body_w) * g)
        head_rect = (g, head_left * g, body_top * g, (head_left + head_w) * g)
        torso_rect = ((body_top + 1) * g, (body_left + 1) * g, (body_top + 1 + torso_h) * g,
                      (body_left + body_w - 1) * g)
        avoid = [background, body]
        params = cls(
            seed=seed,
            canvas=(size, size),
            background=background,
            body_color=body,
            head_rect=head_rect,
            body_rect=body_rect,
            torso_rect=torso_rect,
            garment_a=_garment(rng, avoid),
            garment_b=_garment(rng, avoid),
            garment_c=_garment(rng, avoid),
        )
        params.validate()
        return params


def color_distance(a, b) -> float:
    return float(np.max(np.abs(np.subtract(a, b))))


def _color(rng: np.random.Generator, avoid=()) -> tuple[float, float, float]:
    while True:
        c = tuple(float(v) for v in rng.choice(_LEVELS, size=3))
        if all(color_distance(c, a) >= MIN_COLOR_DISTANCE for a in (*avoid, WHITE)):
            return c


def _garment(rng: np.random.Generator, avoid) -> Garment:
    pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    c0 = _color(rng, avoid)
    c1 = _color(rng, [*avoid, c0])
    return Garment(pattern, (c0, c1))


def pattern_cell(canvas: tuple[int, int]) -> int:
    """Side of one pattern cell in pixels (1 on a 32-pixel canvas)."""
    return max(1, canvas[0] // 32)


def grid_step(canvas: tuple[int, int]) -> int:
    """Scene rectangles snap to this pixel grid (2 on a 32-pixel canvas).

    With a 2-pixel step every 2x2 patch holds whole pattern periods in the
    same phase, so a garment's worn and flat renderings agree token by token.
    """
    return max(1, canvas[0] // 16)


def render_garment(garment: Garment, shape: tuple[int, int], cell: int = 1) -> np.ndarray:
    """(h, w, 3) garment texture in garment-local coordinates."""
    h, w = shape
    r, c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if garment.pattern == "solid":
        idx = np.zeros((h, w), dtype=int)
    elif garment.pattern == "stripes":
        idx = (r // cell) % 2
    else:
        idx = (r // cell + c // cell) % 2
    return np.asarray(garment.palette, dtype=np.float64)[idx]


def _canvas(shape, color) -> np.ndarray:
    return np.broadcast_to(np.asarray(color, dtype=np.float64), (*shape, 3)).copy()


def _paint(img: np.ndarray, rect: Rect, value) -> None:
    top, left, bottom, right = rect
    img[top:bottom, left:right] = value


def _mask(shape, rect: Rect) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    _paint(m, rect, True)
    return m


def _rect_size(rect: Rect) -> tuple[int, int]:
    return rect[2] - rect[0], rect[3] - rect[1]


def _centered(canvas: tuple[int, int], size: tuple[int, int], top: int | None = None) -> Rect:
    h, w = size
    t = (canvas[0] - h) // 2 if top is None else top
    left = (canvas[1] - w) // 2
    return t, left, t + h, left + w


def render_figure(canvas, background, body_color, head_rect: Rect, body_rect: Rect) -> np.ndarray:
    img = _canvas(canvas, background)
    _paint(img, head_rect, body_color)
    _paint(img, body_rect, body_color)
    return img


def flat_rect(canvas, size: tuple[int, int]) -> Rect:
    """Where a flat garment of ``size`` sits: centred, snapped to the scene grid."""
    cell = grid_step(canvas)
    top, left, _, _ = _centered(canvas, size)
    top, left = top // cell * cell, left // cell * cell
    return top, left, top + size[0], left + size[1]


def render_flat(canvas, garment: Garment, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    rect = flat_rect(canvas, size)
    img = _canvas(canvas, WHITE)
    _paint(img, rect, render_garment(garment, size, pattern_cell(canvas)))
    return img, _mask(canvas, rect)


def layer_rect(torso_rect: Rect, cell: int = 1) -> Rect:
    """Upper half of the torso (rounded down to whole cells), where the over-garment sits."""
    top, left, bottom, right = torso_rect
    half = max(cell, (bottom - top) // 2 // cell * cell)
    return top, left, top + half, right


def canonical_geometry(canvas: tuple[int, int], torso_size: tuple[int, int]) -> tuple[Rect, Rect, Rect]:
    """Fixed figure sized to fit a torso of ``torso_size``: (head, body, torso)."""
    h, w = canvas
    g = grid_step(canvas)
    th, tw = torso_size
    body_w = tw + 2 * g
    body_top = 5 * g
    body_left = (w - body_w) // 2 // g * g
    body = (body_top, body_left, h - g, body_left + body_w)
    head_w = max(g, body_w // 2 // g * g)
    head_left = body_left + (body_w - head_w) // 2 // g * g
    head = (g, head_left, body_top, head_left + head_w)
    torso = (body_top + g, body_left + g, body_top + g + th, body_left + g + tw)
    return head, body, torso


@dataclass(frozen=True, eq=False)
class Triple:
    """Ground truth for one scene.

    ``target_image`` is the figure of ``model_image`` wearing garment B, which
    ``garment_image`` shows flat on white. The extra fields feed the other
    tasks: garment C (layered over B's upper half), and a canonical figure
    wearing B for model-free try-on.
    """

    model_image: np.ndarray
    garment_image: np.ndarray
    target_image: np.ndarray
    edit_region: np.ndarray
    garment_region: np.ndarray
    layer_garment_image: np.ndarray
    layered_target: np.ndarray
    canonical_target: np.ndarray
    canonical_region: np.ndarray
    params: SceneParams | None = field(default=None)

    def images(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in IMAGE_FIELDS + MASK_FIELDS}


def generate_triple(params: SceneParams) -> Triple:
    params.validate()
    canvas = params.canvas
    cell = pattern_cell(canvas)
    torso = params.torso_rect
    torso_size = _rect_size(torso)
    figure = render_figure(canvas, params.background, params.body_color, params.head_rect, params.body_rect)

    model_image = figure.copy()
    _paint(model_image, torso, render_garment(params.garment_a, torso_size, cell))
    target_image = figure.copy()
    _paint(target_image, torso, render_garment(params.garment_b, torso_size, cell))
    garment_image, garment_region = render_flat(canvas, params.garment_b, torso_size)

    upper = layer_rect(torso, grid_step(canvas))
    layered_target = target_image.copy()
    _paint(layered_target, upper, render_garment(params.garment_c, _rect_size(upper), cell))
    layer_garment_image, _ = render_flat(canvas, params.garment_c, _rect_size(upper))

    head, body, ctorso = canonical_geometry(canvas, torso_size)
    canonical_target = render_figure(canvas, CANONICAL_BACKGROUND, CANONICAL_BODY, head, body)
    _paint(canonical_target, ctorso, render_garment(params.garment_b, torso_size, cell))

    return Triple(
        model_image=model_image,
        garment_image=garment_image,
        target_image=target_image,
        edit_region=_mask(canvas, torso),
        garment_region=garment_region,
        layer_garment_image=layer_garment_image,
        layered_target=layered_target,
        canonical_target=canonical_target,
        canonical_region=_mask(canvas, ctorso),
        params=params,
    )


def check_triple(triple: Triple) -> list[str]:
    """Return the list of violated invariants (empty when the triple is sound)."""
    problems = []
    outside = ~triple.edit_region
    if not np.array_equal(triple.target_image[outside], triple.model_image[outside]):
        problems.append("target differs from model image outside the edit region")
    worn = _crop(triple.target_image, triple.edit_region)
    flat = _crop(triple.garment_image, triple.garment_region)
    if worn.shape != flat.shape or not np.array_equal(worn, flat):
        problems.append("worn garment is not a translation of the flat garment")
    for name, img in triple.images().items():
        if img.dtype != bool and (img.min() < 0 or img.max() > 1):
            problems.append(f"{name} outside [0, 1]")
    return problems


def _crop(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return img[:0, :0]
    return img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


@dataclass(frozen=True, eq=False)
class TaskExample:
    task: TaskSpec
    conditions: list[ConditionSpec]
    target: LatentGrid
    target_image: np.ndarray
    edit_mask: np.ndarray
    garment: Garment | None = None  # garment expected inside edit_mask, if any
    garment_rect: Rect | None = None

    def as_training_example(self):
        return self.task, self.conditions, self.target


def make_task_example(triple: Triple, task: Task | str, patch_size: int = 2,
                      task_token_count: int = 1) -> TaskExample:
    task = Task(task)
    p = triple.params
    if task is Task.TRYON:
        images = [triple.model_image, triple.garment_image]
        target, mask = triple.target_image, triple.edit_region
        garment, rect = (p.garment_b, p.torso_rect) if p else (None, None)
    elif task is Task.MODEL_FREE_TRYON:
        images = [triple.garment_image]
        target, mask = triple.canonical_target, triple.canonical_region
        garment = p.garment_b if p else None
        rect = canonical_geometry(p.canvas, _rect_size(p.torso_rect))[2] if p else None
    elif task is Task.GARMENT_RECONSTRUCTION:
        images = [triple.target_image]
        target, mask = triple.garment_image, triple.garment_region
        garment = p.garment_b if p else None
        rect = flat_rect(p.canvas, _rect_size(p.torso_rect)) if p else None
    else:
        images = [triple.model_image, triple.garment_image, triple.layer_garment_image]
        target, mask = triple.layered_target, triple.edit_region
        garment, rect = None, None
    conditions = [
        ConditionSpec(LatentGrid.from_image(img, patch_size), i + 1, aligned, role)
        for i, (img, (role, aligned)) in enumerate(zip(images, TASK_CONDITIONS[task]))
    ]
    return TaskExample(
        task=TaskSpec(task, task_token_count),
        conditions=conditions,
        target=LatentGrid.from_image(target, patch_size),
        target_image=target,
        edit_mask=mask,
        garment=garment,
        garment_rect=rect,
    )


def triple_seed(seed: int, index: int) -> int:
    """Scene seed of the ``index``-th triple of a dataset seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(n: int, seed: int, size: int = 32) -> list[Triple]:
    return [generate_triple(SceneParams.random(triple_seed(seed, i), size)) for i in range(n)]


class TaskSampler:
    """Deterministic task schedule; after ``n`` draws each task count is within 1 of ``n * weight``."""

    def __init__(self, weights: dict[str, float]):
        self.tasks = [Task(t) for t in weights]
        self.weights = np.asarray([weights[t] for t in weights], dtype=np.float64)
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError(f"task weights must be non-negative and sum to 1, got {weights}")
        self._credit = np.zeros(len(self.tasks))

    def next(self) -> Task:
        self._credit += self.weights
        i = int(np.argmax(self._credit))
        self._credit[i] -= 1.0
        return self.tasks[i]

    def take(self, n: int) -> list[Task]:
        return [self.next() for _ in range(n)]


# --- on-disk datasets -------------------------------------------------------

def _png_bytes(img: np.ndarray) -> bytes:
    if img.dtype == bool:
        arr = img.astype(np.uint8) * 255
        mode = "L"
    else:
        arr = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        mode = "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _decode_png(data: bytes, is_mask: bool) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im)
    if is_mask:
        return arr > 127
    return arr.astype(np.float64) / 255.0


def write_manifest(directory, n: int, seed: int, size: int = 32) -> Path:
    """Generate ``n`` triples into ``directory`` with a JSON-lines index.

    The first line is a header record; every further line describes one
    triple: ``index``, scene ``seed``, the ``tasks`` it supports, and
    relative PNG ``files`` with their SHA-256 digests.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": "ropecast-dataset", "version": MANIFEST_VERSION, "n": n, "seed": seed,
                         "size": size})]
    for i in range(n):
        s = triple_seed(seed, i)
        triple = generate_triple(SceneParams.random(s, size))
        files, digests = {}, {}
        for name, img in triple.images().items():
            rel = f"{i:06d}/{name}.png"
            data = _png_bytes(img)
            atomic_write_bytes(directory / rel, data)
            files[name] = rel
            digests[name] = hashlib.sha256(data).hexdigest()
        lines.append(json.dumps({"index": i, "seed": s, "tasks": [t.value for t in Task], "files": files,
                                 "sha256": digests}, sort_keys=True))
    path = directory / MANIFEST_NAME
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
    return path


class DatasetError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} problem(s) in dataset:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class Dataset:
    triples: list[Triple]
    seed: int | None = None
    size: int = 32
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.triples)

    def __getitem__(self, i: int) -> Triple:
        return self.triples[i]

    @classmethod
    def generate(cls, n: int, seed: int, size: int = 32) -> "Dataset":
        return cls(generate_dataset(n, seed, size), seed=seed, size=size)


def read_manifest(directory) -> Dataset:
    """Load a dataset written by :func:`write_manifest`.

    Every missing, unreadable or checksum-mismatched file is collected and
    reported together in a :class:`DatasetError`.
    """
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise DatasetError([f"{path}: manifest not found"])
    problems: list[str] = []
    lines = path.read_text().splitlines()
    try:
        header = json.loads(lines[0])
    except (IndexError, json.JSONDecodeError) as exc:
        raise DatasetError([f"{path}:1: bad header ({exc})"]) from None
    if header.get("format") != "ropecast-dataset" or header.get("version") != MANIFEST_VERSION:
        raise DatasetError([f"{path}:1: unsupported manifest header {header}"])
    size = int(header["size"])
    triples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"{path}:{lineno}: bad record ({exc})")
            continue
        images = {}
        for name in IMAGE_FIELDS + MASK_FIELDS:
            rel = rec.get("files", {}).get(name)
            if rel is None:
                problems.append(f"record {rec.get('index')}: missing entry for {name}")
                continue
            fpath = directory / rel
            try:
                data = fpath.read_bytes()
            except OSError as exc:
                problems.append(f"{rel}: unreadable ({exc.strerror})")
                continue
            if hashlib.sha256(data).hexdigest() != rec.get("sha256", {}).get(name):
                problems.append(f"{rel}: checksum mismatch")
                continue
            try:
                images[name] = _decode_png(data, name in MASK_FIELDS)
            except Exception as exc:  # PIL raises a zoo of exception types
                problems.append(f"{rel}: undecodable ({exc})")
        if len(images) == len(IMAGE_FIELDS) + len(MASK_FIELDS):
            params = SceneParams.random(int(rec["seed"]), size)
            triples.append(Triple(**images, params=params))
    if problems:
        raise DatasetError(problems)
    if not triples:
        raise DatasetError([f"{path}: no triples"])
    return Dataset(triples, seed=header.get("seed"), size=size, root=directory)


def force_same_garment(params: SceneParams) -> SceneParams:
    """Scene whose garment B equals garment A (identity edit)."""
    return replace(params, garment_b=params.garment_a)
