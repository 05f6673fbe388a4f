"""Command-line front end for the pipeline.

Commands: synth-features, train, eval, gradcheck, convergence, inspect-vfea.
Exit codes: 0 success, 1 assertion/check failure, 2 usage or config error.
Every run writes a manifest.json next to its outputs; all artifacts stay
inside the requested --out directory.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .config import build_model_config, load_run_config
from .errors import ConfigError
from .evaluation import run_evaluation, write_report
from .model import VireoModel
from .pgm import write_pgm
from .providers import ProviderConfig, synth_features, synth_text_bank
from .training import (
    SyntheticTask,
    convergence_experiment,
    train_run,
    write_convergence_csv,
    write_trace_csv,
)
from .vfea import inspect as inspect_vfea
from .vfea import save_feature_file
from .verification import TOLERANCE, run_suite


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"vireo-{__version__}"


def _default_seed() -> int:
    raw = os.environ.get("VIREO_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"VIREO_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _write_manifest(out_dir: Path, command: str, args, seed: int) -> None:
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "seed": seed,
        "out": str(out_dir),
        "build_id": _build_id(),
        "argv": sys.argv[1:],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_synth_features(args) -> int:
    seed = _resolve_seed(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    provider = ProviderConfig(layers=args.layers, h=args.height, w=args.width,
                              d=args.feature_width, d_depth=args.depth_width)
    stack = synth_features(args.image_id, provider, seed=seed)
    stack_path = out_dir / f"{args.image_id}.vfea"
    save_feature_file(stack_path, stack)
    written = [stack_path.name]
    if args.classes:
        bank = synth_text_bank(args.classes.split(","), seed=seed, d=args.feature_width)
        bank_path = out_dir / "text_bank.vfea"
        save_feature_file(bank_path, bank)
        written.append(bank_path.name)
    _write_manifest(out_dir, "synth-features", args, seed)
    print(f"wrote {', '.join(written)} to {out_dir}")
    return 0


def cmd_train(args) -> int:
    from .reporting import loss_curve_figure

    seed = _resolve_seed(args)
    settings = load_run_config(args.config)
    settings.train.seed = seed
    settings.task.seed = seed
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    task = SyntheticTask(settings.task)
    model = VireoModel(build_model_config(settings), seed=seed)
    result = train_run(model, task, settings.train)
    model.save_checkpoint(out_dir / "checkpoint")
    write_trace_csv(result.trace, out_dir / "loss.csv")
    loss_curve_figure(result.trace, out_dir / "loss.png")
    _write_manifest(out_dir, "train", args, seed)
    print(f"trained {settings.train.total_iters} iterations: loss "
          f"{result.trace[0].loss_total:.4f} -> {result.trace[-1].loss_total:.4f}; "
          f"artifacts in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .reporting import attention_figure, miou_bar_figure

    seed = _resolve_seed(args)
    settings = load_run_config(args.config)
    settings.task.seed = seed
    task = SyntheticTask(settings.task)
    model = VireoModel.load_checkpoint(Path(args.checkpoint))
    if model.config.d != settings.task.d:
        raise ConfigError(f"incompatible checkpoint version: width {model.config.d} "
                          f"differs from task width {settings.task.d}")
    bank = task.train_bank if args.bank == "train" else task.eval_bank

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outcome = run_evaluation(model, task, bank, collect_attention=args.dump_attn)
    csv_path, txt_path = write_report(outcome.results, out_dir)
    miou_bar_figure(outcome.results, out_dir / "report.png")

    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for image_id, pred in outcome.predictions.items():
        write_pgm(pred_dir / f"{image_id}.pgm", pred)
    if args.dump_attn:
        attn_dir = out_dir / "attention"
        attn_dir.mkdir(exist_ok=True)
        for image_id, weights in outcome.spatial_weights.items():
            named = [(f"{image_id}/alpha/{bank.classes[k]}", weights[k])
                     for k in range(weights.shape[0])]
            save_feature_file(attn_dir / f"{image_id}_alpha.vfea", named)
            attention_figure(weights, bank.classes, attn_dir / f"{image_id}_alpha.png")
    _write_manifest(out_dir, "eval", args, seed)
    print(txt_path.read_text(), end="")
    print(f"report in {csv_path}")
    return 0


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - started
    worst_name, worst = max(results, key=lambda item: item[1])
    for name, err in results:
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:32s} max-rel-err {err:.3e}  {status}")
    print(f"{len(results)} checks in {elapsed:.1f}s; worst {worst:.3e} ({worst_name})")
    return 0 if all(err <= TOLERANCE for _, err in results) else 1


def cmd_convergence(args) -> int:
    from .reporting import convergence_figure

    seed = _resolve_seed(args)
    settings = load_run_config(args.config)
    seeds = [seed + i for i in range(args.seeds)]
    report = convergence_experiment(settings.task, settings.train, seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_convergence_csv(report, out_dir / "experiment.csv")
    convergence_figure(report, out_dir / "convergence.png")
    _write_manifest(out_dir, "convergence", args, seed)
    with_m = report.median_with
    without_m = report.median_without

    def show(v):
        return "not_reached" if v == float("inf") else f"{v:.0f}"

    print(f"median iterations to tau: {show(with_m)} with coarse prior, "
          f"{show(without_m)} without; rows in {out_dir / 'experiment.csv'}")
    return 0


def cmd_inspect_vfea(args) -> int:
    info = inspect_vfea(args.path)
    if args.json:
        print(json.dumps(info, indent=2))
        return 0
    print(f"{info['path']}: kind={info['kind']}"
          + (f" image_id={info['image_id']}" if "image_id" in info else ""))
    for entry in info["entries"]:
        desc = ", ".join(f"{k}={v}" for k, v in entry.items())
        print(f"  {desc}")
    print(f"  {len(info['entries'])} entries, CRC ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vireo",
                                     description="open-vocabulary segmentation desk pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-features", help="write synthetic feature/text files")
    p.add_argument("--out", required=True)
    p.add_argument("--image-id", default="image000")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--feature-width", type=int, default=16)
    p.add_argument("--depth-width", type=int, default=8)
    p.add_argument("--classes", default="")
    p.set_defaults(func=cmd_synth_features)

    p = sub.add_parser("train", help="train on the synthetic task")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bank", choices=("train", "full"), default="full")
    p.add_argument("--dump-attn", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("convergence", help="coarse-prior convergence experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("inspect-vfea", help="validate and summarise a VFEA file")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect_vfea)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file {exc.filename or exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
