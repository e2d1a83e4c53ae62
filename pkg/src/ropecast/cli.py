"""``ropecast`` command-line entry point.

Exit codes::

    0  success
    1  internal-error
    2  usage-error            bad or unknown flags
    3  config-error           config file parse/validation failure
    4  checkpoint-not-found
    5  checkpoint-invalid     bad magic, checksum or tensor table
    6  dataset-error          missing/corrupt dataset files
    7  training-diverged
    8  selftest-failed

On failure a single line ``error: <class>: <message>`` goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

EXIT_CODES = {
    "internal-error": 1,
    "usage-error": 2,
    "config-error": 3,
    "checkpoint-not-found": 4,
    "checkpoint-invalid": 5,
    "dataset-error": 6,
    "training-diverged": 7,
    "selftest-failed": 8,
}
TASK_NAMES = ("tryon", "model_free_tryon", "garment_reconstruction", "tryon_in_layers")


class CommandError(Exception):
    def __init__(self, error_class: str, message: str):
        super().__init__(message)
        self.error_class = error_class


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError("usage-error", message)


def _size(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None
    return rows, cols


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ropecast", description="Adaptive three-axis RoPE conditioning on a synthetic try-on task.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    data = sub.add_parser("data", help="dataset utilities")
    data_sub = data.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    gen = data_sub.add_parser("gen", help="generate a synthetic dataset with a manifest")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--n", type=int, required=True, help="number of scenes")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=32, help="canvas size in pixels")

    def add_config(sp):
        sp.add_argument("--config", help="YAML run config (defaults used when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config field, e.g. train.steps=100")
        sp.add_argument("--seed", type=int, help="shortcut for train.seed")

    train = sub.add_parser("train", help="train a model")
    add_config(train)
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--resume", help="checkpoint to continue from")

    ablate = sub.add_parser("ablate", help="train and evaluate the three ablation arms")
    add_config(ablate)
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--tasks", nargs="+", default=["tryon"], choices=TASK_NAMES)

    sample = sub.add_parser("sample", help="generate image sheets from a checkpoint")
    sample.add_argument("--ckpt", required=True)
    sample.add_argument("--data", help="dataset directory (default: freshly generated scenes)")
    sample.add_argument("--task", default="tryon", choices=TASK_NAMES)
    sample.add_argument("--count", type=int, default=4)
    sample.add_argument("--steps", type=int, default=20)
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--out", default="samples")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True, help="report path (JSON)")
    ev.add_argument("--tasks", nargs="+", default=["tryon"], choices=TASK_NAMES)
    ev.add_argument("--steps", type=int, default=20)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--limit", type=int)

    rope = sub.add_parser("inspect-rope", help="print RoPE frequencies and rotation tables")
    rope.add_argument("--dim", type=int, required=True, help="axis dimension (even)")
    rope.add_argument("--theta", type=float, default=10000.0)
    rope.add_argument("--max-pos", type=int, default=-1, help="also print cos/sin for positions 0..N")
    rope.add_argument("--out", help="also write the output to this file")

    lay = sub.add_parser("inspect-layout", help="print the (index, segment, w, y, x) table for a task")
    lay.add_argument("--task", required=True, choices=TASK_NAMES)
    lay.add_argument("--size", type=_size, required=True, help="token grid ROWSxCOLS for every image")
    lay.add_argument("--task-tokens", type=int, default=1)
    lay.add_argument("--no-adaptive", action="store_true", help="ablation layout: no id channel, no alignment")
    lay.add_argument("--out", help="also write the table to this file")

    sub.add_parser("selftest", help="run the built-in invariant suites")
    return p


def _write_snapshot(path: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    snap = {k: v for k, v in vars(args).items() if k != "func"}
    snap = json.loads(json.dumps(snap, default=str))
    if extra:
        snap.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(snap, sort_keys=True))


def _emit(text: str, out: str | None, args) -> None:
    sys.stdout.write(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        _write_snapshot(Path(f"{out}.config.yaml"), args)


def _resolve_config(args):
    from .trainer import RunConfig, load_config, ConfigError

    run = load_config(args.config) if args.config else RunConfig()
    d = run.to_dict()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set {item!r}: expected SECTION.KEY=VALUE")
        node = d
        *parents, leaf = key.split(".")
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"--set {item!r}: unknown section {part!r}")
            node = node[part]
        node[leaf] = yaml.safe_load(value)
    if args.seed is not None:
        d["train"]["seed"] = args.seed
    return RunConfig.from_dict(d)


def cmd_data_gen(args):
    from .synthdata import write_manifest

    path = write_manifest(args.out, args.n, args.seed, args.size)
    _write_snapshot(Path(args.out) / "resolved_config.yaml", args)
    print(f"wrote {args.n} scenes to {path}")


def cmd_train(args):
    from .trainer import train

    run = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(run.to_yaml())
    if args.resume and not Path(args.resume).exists():
        raise CommandError("checkpoint-not-found", args.resume)
    result = train(run, run.data.load(), out, resume=args.resume)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained {result.step} steps, final loss {last:.6f}, checkpoint {result.checkpoint}")


def cmd_ablate(args):
    from .trainer import run_ablation

    run = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(run.to_yaml())
    report = run_ablation(run, out, tasks=args.tasks)
    for name, arm in report["arms"].items():
        for task, m in arm["report"]["tasks"].items():
            print(f"{name:<22} {task:<22} background_mse={m['background_mse']:.5f} "
                  f"edit_mse={m['edit_mse']:.5f} ssim={m['ssim_mean']:.4f}")


def _load_checkpoint(path):
    from .checkpoint import CheckpointError, load_model

    if not Path(path).exists():
        raise CommandError("checkpoint-not-found", str(path))
    try:
        return load_model(path)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CommandError("checkpoint-invalid", f"{path}: {exc}") from None


def _load_dataset(path, n, seed, size):
    from .synthdata import Dataset, read_manifest

    return read_manifest(path) if path else Dataset.generate(n, seed, size)


def cmd_sample(args):
    from PIL import Image

    from .evalkit import sample_examples
    from .synthdata import make_task_example

    model, _, meta = _load_checkpoint(args.ckpt)
    if args.steps < 1:
        raise CommandError("usage-error", "--steps must be >= 1")
    train_cfg = meta.get("train_config", {})
    data_cfg = meta.get("run_config", {}).get("data", {})
    dataset = _load_dataset(args.data, args.count, data_cfg.get("eval_seed", 2), data_cfg.get("size", 32))
    triples = dataset.triples[:args.count]
    examples = [make_task_example(t, args.task, model.cfg.patch_size, model.cfg.task_token_count) for t in triples]
    images = sample_examples(model, examples, steps=args.steps, seed=args.seed,
                             clean_latents=train_cfg.get("clean_latents", True),
                             adaptive=train_cfg.get("adaptive_position", True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = model.cfg.patch_size
    for i, (ex, img) in enumerate(zip(examples, images)):
        panels = [c.grid.to_image(p) for c in ex.conditions] + [img, ex.target_image]
        sheet = _sheet(panels)
        Image.fromarray(sheet).resize((sheet.shape[1] * 4, sheet.shape[0] * 4), Image.NEAREST).save(
            out / f"sample_{i:03d}.png")
    _write_snapshot(out / "resolved_config.yaml", args)
    print(f"wrote {len(images)} sheets (conditions | generated | ground truth) to {out}")


def _sheet(panels: list[np.ndarray], gap: int = 2) -> np.ndarray:
    h = max(x.shape[0] for x in panels)
    cols = []
    for i, panel in enumerate(panels):
        if i:
            cols.append(np.zeros((h, gap, 3)))
        cols.append(np.clip(panel, 0, 1))
    return np.rint(np.concatenate(cols, axis=1) * 255).astype(np.uint8)


def cmd_eval(args):
    from .evalkit import evaluate

    model, _, meta = _load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data, 0, 0, 32)
    report = evaluate((model, meta), dataset, args.tasks, steps=args.steps, seed=args.seed, limit=args.limit)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    _write_snapshot(Path(f"{out}.config.yaml"), args)
    for task, m in report.tasks.items():
        line = f"{task}: background_mse={m.background_mse:.5f} edit_mse={m.edit_mse:.5f} ssim={m.ssim_mean:.4f}"
        if m.pattern_accuracy is not None:
            line += f" pattern_accuracy={m.pattern_accuracy:.3f}"
        print(line)


def cmd_inspect_rope(args):
    from .rope3d import axis_frequencies

    try:
        freqs = axis_frequencies(args.dim, args.theta)
    except ValueError as exc:
        raise CommandError("usage-error", str(exc)) from None
    lines = [f"ω = {[float(f) for f in freqs]}"]
    if args.max_pos >= 0:
        lines.append(f"{'pair':>4} {'pos':>4} {'omega':>12} {'cos':>12} {'sin':>12}")
        for m, omega in enumerate(freqs):
            for pos in range(args.max_pos + 1):
                lines.append(f"{m:>4} {pos:>4} {omega:>12.6g} {np.cos(pos * omega):>12.6f} "
                             f"{np.sin(pos * omega):>12.6f}")
    _emit("\n".join(lines) + "\n", args.out, args)


def cmd_inspect_layout(args):
    from .layout import LayoutError, format_layout_table, task_layout

    try:
        seq = task_layout(args.task, args.size, adaptive=not args.no_adaptive, task_token_count=args.task_tokens)
    except LayoutError as exc:
        raise CommandError("usage-error", str(exc)) from None
    _emit(format_layout_table(seq), args.out, args)


def cmd_selftest(args):
    from .selftest import run_all

    if not run_all():
        raise CommandError("selftest-failed", "one or more suites failed")


COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "inspect-rope": cmd_inspect_rope,
    "inspect-layout": cmd_inspect_layout,
    "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .synthdata import DatasetError
    from .trainer import ConfigError, TrainingDiverged

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        if args.command == "data":
            cmd_data_gen(args)
        else:
            COMMANDS[args.command](args)
    except CommandError as exc:
        return _fail(exc.error_class, str(exc))
    except ConfigError as exc:
        return _fail("config-error", str(exc))
    except CheckpointError as exc:
        return _fail("checkpoint-invalid", str(exc))
    except DatasetError as exc:
        print("\n".join(exc.problems), file=sys.stderr)
        return _fail("dataset-error", f"{len(exc.problems)} problem(s)")
    except TrainingDiverged as exc:
        return _fail("training-diverged", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        return _fail("internal-error", f"{type(exc).__name__}: {exc}")
    return 0


def _fail(error_class: str, message: str) -> int:
    message = " ".join(message.split())
    print(f"error: {error_class}: {message}", file=sys.stderr)
    return EXIT_CODES[error_class]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
