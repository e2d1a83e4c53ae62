"""Training loop, run configuration and the three-arm ablation harness."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import checkpoint as ckpt
from .dit import DiT, ModelConfig, batch_loss
from .flow import element_rng, make_batch
from .layout import Task
from .rope3d import RopeConfig
from .synthdata import Dataset, TaskSampler, make_task_example, read_manifest

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
ARMS = {
    "full": {"clean_latents": True, "adaptive_position": True},
    "no_adaptive_position": {"clean_latents": True, "adaptive_position": False},
    "no_clean_latent": {"clean_latents": False, "adaptive_position": True},
}
_DATA_STREAM = 0xDA7A


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class ArmDriftError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    task_weights: dict = field(default_factory=lambda: {t.value: 0.25 for t in Task})
    clean_latents: bool = True
    adaptive_position: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    t_distribution: str = "uniform"
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps must be >= 0, batch_size and checkpoint_every >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0, eps > 0")
        weights = {Task(k).value: float(v) for k, v in self.task_weights.items()}
        if any(v < 0 for v in weights.values()) or not np.isclose(sum(weights.values()), 1.0):
            raise ConfigError(f"task_weights must be non-negative and sum to 1, got {weights}")
        object.__setattr__(self, "task_weights", weights)
        if self.t_distribution not in ("uniform", "logit_normal"):
            raise ConfigError(f"unknown t_distribution {self.t_distribution!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class DataConfig:
    dir: str | None = None
    n: int = 512
    seed: int = 1
    size: int = 32
    eval_n: int = 64
    eval_seed: int = 2

    def load(self) -> Dataset:
        if self.dir:
            return read_manifest(self.dir)
        return Dataset.generate(self.n, self.seed, self.size)

    def load_eval(self) -> Dataset:
        return Dataset.generate(self.eval_n, self.eval_seed, self.size)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval_steps: int = 20

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": asdict(self.data), "eval_steps": self.eval_steps}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_flags(self, **flags) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **flags))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {version}")
        model_d = dict(d.pop("model", {}) or {})
        rope_d = model_d.pop("rope", None)
        try:
            model = _build(ModelConfig, model_d, "model")
            if rope_d:
                head_dim = model.head_dim
                rope_d = dict(rope_d)
                rope_d.setdefault("head_dim", head_dim)
                if rope_d.get("axis_split") is not None:
                    rope_d["axis_split"] = tuple(rope_d["axis_split"])
                model = dataclasses.replace(model, rope=_build(RopeConfig, rope_d, "model.rope"))
            train = _build(TrainConfig, d.pop("train", {}) or {}, "train")
            data = _build(DataConfig, d.pop("data", {}) or {}, "data")
            eval_steps = int(d.pop("eval_steps", 20))
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if d:
            raise ConfigError(f"unknown top-level field(s): {sorted(d)}")
        return cls(model=model, train=train, data=data, eval_steps=eval_steps)


def _build(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown field")
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_config(path) -> RunConfig:
    """Parse a YAML run config; errors name the offending line or field."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"{path}:{mark.line + 1}:{mark.column + 1}: {exc.problem}") from None
    try:
        return RunConfig.from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: DiT
    losses: list[float]
    checkpoint: Path | None
    step: int


def make_optimizer(model: DiT, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def save_training_state(path, model: DiT, opt: torch.optim.Optimizer, run: RunConfig, step: int,
                        losses: list[float] | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            for key, value in opt.state.get(p, {}).items():
                tensors[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value)
    meta = {"step": step, "train_config": run.train.to_dict(), "run_config": run.to_dict()}
    if losses is not None:
        meta["losses"] = losses
    ckpt.save(path, run.model.to_dict(), tensors, meta)


def restore_training_state(path, model: DiT, opt: torch.optim.Optimizer) -> dict:
    _, tensors, meta = ckpt.load(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    params = dict(model.named_parameters())
    state: dict = {}
    for key, value in tensors.items():
        if key.startswith("optim."):
            name, slot = key[6:].rsplit(".", 1)
            state.setdefault(params[name], {})[slot] = value
    opt.state.clear()
    for p, s in state.items():
        opt.state[p] = s
    return meta


class ExampleCache:
    def __init__(self, dataset: Dataset, model_cfg: ModelConfig):
        self.dataset = dataset
        self.cfg = model_cfg
        self._cache: dict = {}

    def get(self, index: int, task: Task):
        key = (index, task)
        if key not in self._cache:
            ex = make_task_example(self.dataset[index], task, self.cfg.patch_size, self.cfg.task_token_count)
            self._cache[key] = ex.as_training_example()
        return self._cache[key]


def step_examples(cache: ExampleCache, sampler: TaskSampler, cfg: TrainConfig, step: int):
    tasks = sampler.take(cfg.batch_size)
    idx = element_rng(cfg.seed, step, _DATA_STREAM).integers(len(cache.dataset), size=cfg.batch_size)
    return [cache.get(int(i), t) for i, t in zip(idx, tasks)]


def train(run: RunConfig, dataset: Dataset, out_dir=None, *, resume=None, stop_at: int | None = None) -> TrainResult:
    """Optimise the masked flow-matching loss.

    Writes ``metrics.jsonl`` (``step``, ``loss``, ``wall_time`` per line) and
    ``step_XXXXXX.ckpt`` / ``final.ckpt`` checkpoints into ``out_dir`` when
    given. ``resume`` continues from a checkpoint; ``stop_at`` ends early
    (after that many total steps) without changing the schedule.
    """
    cfg = run.train
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = DiT(run.model, seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    start, losses = 0, []
    if resume is not None:
        meta = restore_training_state(resume, model, opt)
        start = int(meta["step"])
        losses = list(meta.get("losses", []))[:start]
    sampler = TaskSampler(cfg.task_weights)
    sampler.take(start * cfg.batch_size)
    cache = ExampleCache(dataset, run.model)

    end = cfg.steps if stop_at is None else min(cfg.steps, stop_at)
    metrics = open(out / "metrics.jsonl", "a" if resume else "w") if out is not None else None
    t0 = time.perf_counter()
    last_ckpt = None
    try:
        for step in range(start, end):
            batch = make_batch(step_examples(cache, sampler, cfg, step), cfg.seed, step,
                               clean_latents=cfg.clean_latents, adaptive=cfg.adaptive_position,
                               t_distribution=cfg.t_distribution)
            opt.zero_grad(set_to_none=True)
            loss = batch_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value) or value > 1e4:
                raise TrainingDiverged(f"step {step}: loss {value:.6g} (t={batch.times})")
            loss.backward()
            opt.step()
            losses.append(value)
            if metrics is not None:
                metrics.write(json.dumps({"step": step, "loss": value,
                                          "wall_time": round(time.perf_counter() - t0, 4)}) + "\n")
            if step % 100 == 0:
                log.info("step %d loss %.5f", step, value)
            done = step + 1
            if out is not None and (done % cfg.checkpoint_every == 0 or done == end):
                last_ckpt = out / (f"final.ckpt" if done == cfg.steps else f"step_{done:06d}.ckpt")
                save_training_state(last_ckpt, model, opt, run, done, losses)
    finally:
        if metrics is not None:
            metrics.close()
    if out is not None:
        (out / "resolved_config.yaml").write_text(run.to_yaml())
    return TrainResult(model, losses, last_ckpt, end)


# --- ablation ---------------------------------------------------------------

def residual_hash(run: RunConfig) -> str:
    d = run.to_dict()
    for flag in ("clean_latents", "adaptive_position"):
        d["train"].pop(flag)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _completed(path: Path, run: RunConfig) -> bool:
    if not path.exists():
        return False
    try:
        _, _, meta = ckpt.load(path)
    except ckpt.CheckpointError:
        return False
    return meta.get("run_config") == run.to_dict() and meta.get("step") == run.train.steps


def train_arm(run: RunConfig, dataset: Dataset, arm_dir) -> Path:
    """Train one configuration, reusing a finished checkpoint with an identical config."""
    arm_dir = Path(arm_dir)
    final = arm_dir / "final.ckpt"
    if _completed(final, run):
        log.info("reusing %s", final)
        return final
    result = train(run, dataset, arm_dir)
    return result.checkpoint


def run_ablation(run: RunConfig, out_dir, *, dataset: Dataset | None = None, eval_dataset: Dataset | None = None,
                 tasks=(Task.TRYON,), eval_seed: int = 0) -> dict:
    """Train and evaluate the three arms; they differ only in the two flags."""
    from .evalkit import evaluate

    out = Path(out_dir)
    arms = {name: run.with_flags(**flags) for name, flags in ARMS.items()}
    hashes = {name: residual_hash(r) for name, r in arms.items()}
    if len(set(hashes.values())) != 1:
        raise ArmDriftError(f"arm configs differ beyond the ablation flags: {hashes}")
    dataset = dataset if dataset is not None else run.data.load()
    eval_dataset = eval_dataset if eval_dataset is not None else run.data.load_eval()

    report = {"residual_hash": next(iter(hashes.values())), "arms": {}}
    for name, arm in arms.items():
        path = train_arm(arm, dataset, out / name)
        ev = evaluate(path, eval_dataset, tasks, steps=arm.eval_steps, seed=eval_seed)
        report["arms"][name] = {"flags": ARMS[name], "checkpoint": str(path),
                                "report": json.loads(ev.to_json())}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
