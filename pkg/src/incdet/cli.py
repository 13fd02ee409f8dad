"""Command-line entry points: prepare-data, run, eval, ablate, sweep-distill."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import SyntheticConfig, load_voc, prepare_synthetic_dataset
from .runner import (ABLATION_ROWS, RunConfig, RunError, build_schedule_from_config,
                     evaluate_stage, format_ablation_table, run_ablation,
                     run_distill_sweep, run_experiment, synthetic_default_config)


def _load_config(path: str) -> RunConfig:
    if not Path(path).exists():
        raise RunError("E_CONFIG", f"config file {path} does not exist")
    return RunConfig.load(path)


def cmd_prepare_data(args) -> int:
    cfg = _load_config(args.config) if args.config else synthetic_default_config()
    if cfg.setting != "synthetic":
        raise RunError("E_CONFIG", "prepare-data only generates the synthetic setting")
    prepare_synthetic_dataset(cfg.data_root, cfg.synthetic)
    print(f"synthetic dataset written to {cfg.data_root}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    art = run_experiment(cfg)
    print(art.report_t1.to_table())
    print(art.report_t2.to_table())
    print(f"artifacts in {art.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import TaskResult, load_checkpoint
    cfg = _load_config(args.config)
    state, bank, mapping, meta = load_checkpoint(args.checkpoint)
    schedule = build_schedule_from_config(cfg)
    known = schedule.registry.base_names + schedule.registry.novel_names
    test = load_voc(cfg.data_root, "test", known_labels=known)
    result = TaskResult(state=state, bank=bank, store=None, rehearsal=None,
                        mapping=mapping, metrics=[])
    report, _ = evaluate_stage(result, bank, test, schedule,
                               meta.get("stage", "T?"), cfg)
    print(report.to_table())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.toggles is not None:
        rows = tuple(tuple(t for t in row.split("+") if t)
                     for row in args.toggles)
    else:
        rows = ABLATION_ROWS
    table = run_ablation(cfg, rows, parallel=args.parallel)
    text = format_ablation_table(table)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_table.txt").write_text(text)
    (out / "ablation_table.json").write_text(
        json.dumps(table, sort_keys=True, indent=2) + "\n")
    print(text)
    return 0


def cmd_sweep_distill(args) -> int:
    cfg = _load_config(args.config)
    curves = run_distill_sweep(cfg, args.weights, parallel=args.parallel)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["weight\tt1_base\tt1_novel\tt2_base\tt2_novel\tdefault"]
    for w in sorted(curves):
        c = curves[w]
        lines.append(f"{w:g}\t{c['t1_base']:.4f}\t{c['t1_novel']:.4f}"
                     f"\t{c['t2_base']:.4f}\t{c['t2_novel']:.4f}"
                     f"\t{int(c['default'])}")
    text = "\n".join(lines) + "\n"
    (out / "distill_sweep.txt").write_text(text)
    print(text)
    return 0


def cmd_init_config(args) -> int:
    cfg = synthetic_default_config(out_dir=args.out_dir, data_root=args.data_root,
                                   seed=args.seed)
    cfg.save(args.path)
    print(f"wrote {args.path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incdet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="generate the synthetic VOC-layout dataset")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("run", help="full two-stage run from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-toggle ablation grid")
    p.add_argument("config")
    p.add_argument("--toggles", nargs="*", default=None,
                   help="rows like text+broad (default: all four)")
    p.add_argument("--parallel", type=int, default=1,
                   help="run independent configs in N worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-distill", help="sweep the distillation weight")
    p.add_argument("config")
    p.add_argument("--weights", nargs="+", type=float, required=True)
    p.add_argument("--parallel", type=int, default=1,
                   help="run independent configs in N worker processes")
    p.set_defaults(func=cmd_sweep_distill)

    p = sub.add_parser("init-config", help="write a default synthetic run config")
    p.add_argument("path")
    p.add_argument("--out-dir", default="runs/default")
    p.add_argument("--data-root", default="data/synthetic")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_init_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RunError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"E_RUN: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
