"""Command line entry point: ``scenecast {gen-data,train,sample,evaluate,plot}``.

Every command takes ``--config``, ``--seed`` and ``--out`` and writes its
resolved configuration next to its outputs. Flags override the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig, load_config, save_config, set_dotted


def _parse_set(items):
    out = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out.append((key.strip(), yaml.safe_load(raw)))
    return out


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for key, value in _parse_set(getattr(args, "set", None)):
        set_dotted(cfg, key, value)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.model.preset = args.preset
    if getattr(args, "steps", None) is not None:
        cfg.training.steps = args.steps
    if getattr(args, "K", None) is not None:
        cfg.sampling.K = args.K
    if getattr(args, "zero_scene", False):
        cfg.sampling.zero_scene = True
    if getattr(args, "zero_others", False):
        cfg.sampling.zero_others = True
    cfg.denoiser_config()  # re-validate after overrides
    return cfg


def cmd_gen_data(args, cfg, out):
    from .pipeline import gen_data

    return gen_data(cfg, out)


def cmd_train(args, cfg, out):
    from .pipeline import run_train

    data = Path(args.data) if args.data else out / "data" / "train"
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
    return run_train(cfg, data, ckpt, out, resume_run=args.resume, stop_at=args.stop_at)


def cmd_sample(args, cfg, out):
    from .pipeline import run_sample

    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
    inp = Path(args.input) if args.input else out / "data" / "test"
    dest = Path(args.forecasts) if args.forecasts else out / "forecasts"
    return run_sample(cfg, ckpt, inp, dest)


def cmd_evaluate(args, cfg, out):
    from .pipeline import evaluate

    fc = Path(args.forecasts) if args.forecasts else out / "forecasts"
    gt = Path(args.ground_truth) if args.ground_truth else out / "data" / "test"
    report = evaluate(cfg, fc, gt)
    dest = Path(args.metrics) if args.metrics else out / "metrics.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(json.dumps(report, indent=1, sort_keys=True))
    keys = [k for k in report if k not in ("velocity_curve", "gt_velocity_curve")]
    return {"metrics": str(dest), **{k: report[k] for k in keys}}


def cmd_plot(args, cfg, out):
    from .pipeline import plot

    metrics = Path(args.metrics) if args.metrics else out / "metrics.json"
    fc = Path(args.forecasts) if args.forecasts else out / "forecasts"
    return {"images": plot(cfg, metrics, fc, None, out / "plots")}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="runs/default", help="run directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override e.g. training.steps=500")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="write synthetic train/test recordings")
    common(p)

    p = sub.add_parser("train", help="fit the denoiser")
    common(p)
    p.add_argument("--data", help="directory of training recordings")
    p.add_argument("--checkpoint", help="checkpoint directory to write")
    p.add_argument("--preset", choices=["paper", "desk", "tiny"])
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("--stop-at", type=int, default=None, help="halt after this step (for staged runs)")

    p = sub.add_parser("sample", help="forecast windows of input recordings")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="directory of input recordings")
    p.add_argument("--forecasts", help="output directory")
    p.add_argument("-K", type=int, dest="K")
    p.add_argument("--zero-scene", action="store_true")
    p.add_argument("--zero-others", action="store_true")

    p = sub.add_parser("evaluate", help="score forecasts against ground truth")
    common(p)
    p.add_argument("--forecasts")
    p.add_argument("--ground-truth")
    p.add_argument("--metrics", help="output JSON path")

    p = sub.add_parser("plot", help="trajectory and velocity plots")
    common(p)
    p.add_argument("--metrics")
    p.add_argument("--forecasts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / f"{args.command}.config.json")
        result = COMMANDS[args.command](args, cfg, out)
    except Exception as exc:  # surfaced as a structured message, nonzero exit
        if getattr(args, "verbose", False):
            logging.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
