import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ropecast.evalkit import TaskMetrics, evaluate  # noqa: E402
from ropecast.layout import Task  # noqa: E402
from ropecast.trainer import ARMS, RunConfig, load_config, train_arm  # noqa: E402

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@dataclass
class ArmResult:
    checkpoint: Path
    metrics: TaskMetrics
    losses: list[float]
    train_s: float
    eval_s: float


def _toy(path: Path) -> RunConfig:
    run = load_config(path)
    m, t = run.model, run.train
    assert (m.depth, m.d_model, t.steps, t.batch_size, run.data.size) == (2, 64, 2000, 8, 32)
    assert t.clean_latents and t.adaptive_position
    return run


@pytest.fixture(scope="session")
def toy_run() -> RunConfig:
    """Full configuration trained on try-on only."""
    return _toy(CONFIGS / "toy_tryon.yaml")


@pytest.fixture(scope="session")
def ablation_run() -> RunConfig:
    """Same model and schedule on the four-task mixture."""
    return _toy(CONFIGS / "toy_ablation.yaml")


@pytest.fixture(scope="session")
def trained_arm(tmp_path_factory):
    """Train (once per session) and evaluate one arm of a toy run on held-out try-on scenes.

    Set ``ROPECAST_ACCEPTANCE_DIR`` to keep runs between sessions; a finished
    run is reused only when its stored config matches exactly. Training time
    is read from the run's own metrics log, so reuse does not distort it.
    """
    root = Path(os.environ.get("ROPECAST_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))
    cache: dict = {}

    def get(run: RunConfig, group: str, arm: str) -> ArmResult:
        key = (group, arm)
        if key not in cache:
            arm_run = run.with_flags(**ARMS[arm])
            out = root / group / arm
            path = train_arm(arm_run, arm_run.data.load(), out)
            records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
            start = time.perf_counter()
            report = evaluate(path, arm_run.data.load_eval(), [Task.TRYON], steps=arm_run.eval_steps, seed=0)
            cache[key] = ArmResult(path, report.tasks["tryon"], [r["loss"] for r in records],
                                   records[-1]["wall_time"], time.perf_counter() - start)
        return cache[key]

    return get
