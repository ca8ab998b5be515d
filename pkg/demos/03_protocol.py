"""A compact end-to-end run of the three-step protocol, then evaluation and a report.

Step 0 pretrains each agent alone. Step 1 negotiates the common representation for
the m1/m2 alliance and adapts its receivers. Step 2 joins m3 against the frozen
negotiator. Budgets are scaled down so the demo finishes in a few minutes; pass
"full" for the desk-preset step counts.

Run: python3 demos/03_protocol.py [out_dir] [full]
"""
import json
import sys
from pathlib import Path

import torch

from negorep.config import desk_config
from negorep.evalkit import MetricsReport, domain_gap, emit_report, noise_sweep, run_collab_eval
from negorep.training import Workspace, run_protocol

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/protocol")
full = len(sys.argv) > 2 and sys.argv[2] == "full"
cfg = desk_config()
if not full:
    cfg = cfg.with_overrides({"data.n_train": 128, "data.n_test": 32, "optim.steps_step0": 300,
                              "optim.steps_stage1": 300, "optim.steps_stage2": 100, "optim.steps_join1": 200,
                              "optim.steps_join2": 50, "optim.validate_every": 100})
ws = Workspace(out, cfg)

if not ws.agent_path("protocol").exists():
    # the protocol agent only serves the domain-gap comparison
    from negorep.training import pretrain
    pretrain(ws, ["protocol"])
res = run_protocol(ws, join=["m3"])
for stage in ("stage1", "stage2"):
    losses = res[stage]["losses"]
    print(f"{stage}: loss {losses[0]:.4f} -> {losses[-1]:.4f}, freeze manifest passed: {res[stage]['freeze']['passed']}")
print(f"join m3: freeze {json.dumps(res['join']['m3']['freeze'])}")

rep = run_collab_eval(ws, [["m1", "m2"], ["m1"], ["m2"], ["m1", "m1"], ["m1", "m3"], ["m3"]],
                      methods=("negotiated", "native", "none"), label="demo")
rep.kl = domain_gap(ws)
rep.noise = noise_sweep(ws, ["m1", "m2"], methods=("negotiated", "none"))
print("AP@loose:")
for k, v in sorted(rep.ap.items()):
    print(f"  {k:22s} {v['loose']:.3f}")
print("KL to the local representation (negotiated vs protocol):")
for m, v in rep.kl.items():
    print(f"  {m}: {v['negotiated']:.4f} vs {v['protocol']:.4f}")
for p in emit_report([rep], out / "report"):
    print(f"wrote {p}")
