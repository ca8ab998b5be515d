"""Command-line entry point: ``python3 -m negorep <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success (and every freeze manifest in the workspace passed),
2 bad usage or stage-ordering error, 3 freeze violation, 4 diverged training,
1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .agents import TrainingDiverged
from .checkpoint import CheckpointError, FreezeViolation
from .config import load_config, save_config
from .evalkit import (ABLATION_ROWS, MetricsReport, domain_gap, emit_report, load_reports, noise_sweep,
                      run_ablation, run_collab_eval)
from .training import (OUT_ENV, StageOrderError, Workspace, join_new_agent, pretrain, stage1_negotiate,
                       stage2_adapt)

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_FREEZE, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("negorep")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config (default: desk preset)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. optim.steps_stage1=500")
    common.add_argument("--out", help=f"workspace directory (default: ${OUT_ENV} or runs/default)")
    common.add_argument("--step0-dir", help="reuse Step-0 agents from another workspace")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="negorep", description="Negotiated common-representation collaboration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("pretrain", parents=[common], help="Step 0: homogeneous pretraining")
    s.add_argument("--agents", nargs="+", help="agent ids (default: whole roster)")
    s = sub.add_parser("negotiate", parents=[common], help="Step 1 stage 1: negotiate the common representation")
    s.add_argument("--steps", type=int)
    s = sub.add_parser("adapt", parents=[common], help="Step 1 stage 2: fine-tune alliance receivers")
    s.add_argument("--steps", type=int)
    s = sub.add_parser("join", parents=[common], help="Step 2: align a new agent")
    s.add_argument("agent")
    s = sub.add_parser("eval", parents=[common], help="collaborative detection AP")
    s.add_argument("--sets", nargs="+", default=None, help="agent sets joined by '+', e.g. m1+m2 m1")
    s.add_argument("--methods", nargs="+", default=["negotiated", "none"], choices=["negotiated", "native", "none"])
    s.add_argument("--sigma", type=float, default=0.0, help="pose noise (m for x/y, deg for yaw)")
    s.add_argument("--noise-sweep", action="store_true", help="also sweep the configured noise levels")
    s.add_argument("--stage1-only", action="store_true", help="use receivers before stage-2 adaptation")
    sub.add_parser("domain-gap", parents=[common], help="KL domain gap: negotiated vs protocol representation")
    s = sub.add_parser("ablate", parents=[common], help="training-setting ablation grid (stage 1 only)")
    s.add_argument("--seeds", nargs="+", type=int, default=[0])
    s.add_argument("--steps", type=int)
    s.add_argument("--rows", nargs="+", type=int, help="row indices into the 8-row grid (default all)")
    s = sub.add_parser("report", parents=[common], help="render JSON reports to markdown and plots")
    s.add_argument("inputs", nargs="*", help="report JSON files (default: every file in <out>/reports)")
    s.add_argument("--dest", help="output directory (default <out>/report)")
    return p


def _workspace(args, cfg) -> Workspace:
    root = args.out or os.environ.get(OUT_ENV, "runs/default")
    ws = Workspace(Path(root), cfg, step0_root=args.step0_dir)
    save_config(cfg, ws.root / "config.yaml")
    return ws


def _write(ws: Workspace, name: str, rep: MetricsReport) -> Path:
    p = ws.root / "reports" / f"{name}.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(rep.to_json())
    return p


def run(args) -> int:
    cfg = load_config(args.config, args.set)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    ws = _workspace(args, cfg)
    cmd = args.command
    if cmd == "pretrain":
        out = pretrain(ws, args.agents)
        print(json.dumps({k: {"first_loss": v["first_loss"], "final_loss": v["final_loss"]} for k, v in out.items()}))
    elif cmd == "negotiate":
        out = stage1_negotiate(ws, steps=args.steps)
        print(json.dumps({"final_loss": out["losses"][-1] if out["losses"] else None, "best_val": out["best_val"]}))
    elif cmd == "adapt":
        out = stage2_adapt(ws, steps=args.steps)
        print(json.dumps({"final_loss": out["losses"][-1] if out["losses"] else None}))
    elif cmd == "join":
        out = join_new_agent(ws, args.agent)
        print(json.dumps({"agent": args.agent, "freeze": out["freeze"]}))
    elif cmd == "eval":
        sets = [s.split("+") for s in args.sets] if args.sets else \
            [list(cfg.alliance)] + [[a] for a in cfg.alliance]
        rep = run_collab_eval(ws, sets, methods=args.methods, noise_sigma=args.sigma,
                              adapted=not args.stage1_only, label="eval")
        if args.noise_sweep:
            for s in sets:
                if len(s) > 1:
                    rep.noise.update(noise_sweep(ws, s, methods=[m for m in args.methods if m != "native"]))
        print(_write(ws, "eval", rep))
    elif cmd == "domain-gap":
        rep = MetricsReport(cfg.hash(), cfg.seeds.eval, "domain-gap", kl=domain_gap(ws))
        print(_write(ws, "domain_gap", rep))
    elif cmd == "ablate":
        rows = [ABLATION_ROWS[i] for i in args.rows] if args.rows else ABLATION_ROWS
        res = run_ablation(cfg, ws.root / "ablation", ws.step0_root, rows=rows, seeds=args.seeds, steps=args.steps)
        rep = MetricsReport(cfg.hash(), cfg.seeds.eval, "ablation", ablation=res)
        print(_write(ws, "ablation", rep))
    elif cmd == "report":
        inputs = [Path(p) for p in args.inputs] or sorted((ws.root / "reports").glob("*.json"))
        if not inputs:
            raise StageOrderError("no reports to render")
        reps = [r for p in inputs for r in load_reports(p)]
        for p in emit_report(reps, args.dest or ws.root / "report"):
            print(p)
    failed = [k for k, v in ws.freeze_reports().items() if not v["passed"]]
    if failed:
        log.error("freeze manifests failed: %s", ", ".join(failed))
        return EXIT_FREEZE
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except FreezeViolation as e:
        log.error("%s", e)
        return EXIT_FREEZE
    except TrainingDiverged as e:
        log.error("%s", e)
        return EXIT_DIVERGED
    except (StageOrderError, CheckpointError, KeyError, ValueError) as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
