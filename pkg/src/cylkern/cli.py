"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ExperimentConfig, load_config
from .errors import ConfigError, CylkernError
from .formats import write_xyz
from .harness import (bench_invariance, emit_report, eval_classification_run,
                      eval_registration_run, extract_run, read_report,
                      split_clouds, stream_seed, train_classification,
                      train_registration, RunReport)


def _add_common(p: argparse.ArgumentParser, checkpoint=False):
    p.add_argument("--config", default=None, help="configuration file")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--out", default=None, help="override output directory")
    if checkpoint:
        p.add_argument("--checkpoint", default=None, help="checkpoint file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cylkern",
        description="cylindrical-kernel point descriptors: training, "
                    "evaluation and invariance benchmarks")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, needs_ckpt in [("gen-data", False), ("extract", False),
                             ("train-reg", False), ("eval-reg", True),
                             ("train-cls", False), ("eval-cls", True),
                             ("bench-invariance", True)]:
        _add_common(sub.add_parser(name), checkpoint=needs_ckpt)
    rp = sub.add_parser("report", help="re-render summary files from report.json")
    rp.add_argument("--out", required=True, help="directory holding report.json")
    return ap


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _gen_data(cfg: ExperimentConfig) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    for split in ("train", "test"):
        for i, (cloud, name) in enumerate(split_clouds(cfg, split)):
            path = os.path.join(cfg.out, f"{split}_{i:03d}_{name}.xyz")
            with open(path, "w") as fh:
                fh.write(write_xyz(cloud))
    print(f"wrote clouds to {cfg.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            data = read_report(os.path.join(args.out, "report.json"))
            report = RunReport(task=data["task"], config=data["config"],
                               epoch_losses=data.get("epoch_losses") or [],
                               metrics=data.get("metrics") or {},
                               bench=data.get("bench"),
                               checkpoint_hash=data.get("checkpoint_hash"),
                               extra=data.get("extra") or {})
            emit_report(report, args.out)
            print(f"re-rendered summaries in {args.out}")
            return 0
        cfg = _load(args)
        log = lambda s: print(s, flush=True)
        if args.command == "gen-data":
            _gen_data(cfg)
        elif args.command == "extract":
            extract_run(cfg, cfg.out)
            print(f"feature grids in {cfg.out}")
        elif args.command == "train-reg":
            report = train_registration(cfg, cfg.out, log=log)
            print(f"held-out metrics: {report.metrics['registration']}")
        elif args.command == "eval-reg":
            report = eval_registration_run(cfg, cfg.out, args.checkpoint)
            print(f"metrics: {report.metrics['registration']}")
        elif args.command == "train-cls":
            report = train_classification(cfg, cfg.out, log=log)
            print(f"accuracy: {report.metrics['accuracy']}")
        elif args.command == "eval-cls":
            if not args.checkpoint:
                raise ConfigError("eval-cls requires --checkpoint")
            report = eval_classification_run(cfg, cfg.out, args.checkpoint)
            print(f"accuracy: {report.metrics['accuracy']}")
        elif args.command == "bench-invariance":
            rows = bench_invariance(cfg, cfg.out, args.checkpoint)
            for row in rows:
                print(f"{row['perturbation']:>16}: max {row['max_dev']:.3g} "
                      f"rms {row['rms_dev']:.3g}")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (CylkernError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
