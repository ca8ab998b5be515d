"""Collaboration evaluation, domain-gap measurement, noise sweeps, ablation grids and reports.

Pose-noise convention: ``sigma`` is in meters for x/y and in degrees for yaw
(converted to radians internally).  Noise draws use common random numbers, so a
larger sigma scales the same perturbation rather than drawing a new one.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .agents import detect
from .checkpoint import param_hash
from .config import ExperimentConfig
from .metrics import LOOSE_RADIUS, STRICT_RADIUS, kl_domain_gap, pooled_ap
from .scenegen import Pose
from .training import (Bundle, StageOrderError, Workspace, collab_logits, dataset_for, encode_dataset, load_agent,
                       load_bundle, slot_assignments, stage1_negotiate)

REPORT_SCHEMA = "negorep.report/v1"
METHODS = ("negotiated", "native", "none")


# -- report -----------------------------------------------------------------------

@dataclass
class MetricsReport:
    """One run's numbers.  ``ap`` maps ``"<agents>/<method>"`` to loose/strict AP."""

    config_hash: str
    seed: int
    label: str = ""
    ap: dict[str, dict[str, float]] = field(default_factory=dict)
    kl: dict[str, dict[str, float]] = field(default_factory=dict)
    noise: dict[str, list[dict[str, float]]] = field(default_factory=dict)
    ablation: list[dict] = field(default_factory=list)
    freeze: dict[str, bool] = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        """Content-addressed id; identical config, seed and label give identical ids."""
        blob = json.dumps([self.config_hash, self.seed, self.label], sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:12]

    def validate(self):
        for key, v in self.ap.items():
            for name, x in v.items():
                if not 0.0 <= x <= 1.0:
                    raise ValueError(f"AP {key}/{name}={x} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = REPORT_SCHEMA
        d["run_id"] = self.run_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.pop("schema", REPORT_SCHEMA) != REPORT_SCHEMA:
            raise ValueError("unsupported report schema")
        run_id = d.pop("run_id", None)
        rep = cls(**d)
        if run_id is not None and run_id != rep.run_id:
            raise ValueError("run_id does not match report contents")
        return rep

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def ap_key(agents: Sequence[str], method: str) -> str:
    return f"{'+'.join(agents)}/{method}"


# -- evaluation ------------------------------------------------------------------

def believed_poses(poses: Sequence[Sequence[Pose]], sigma: float, seed: int, scene_ids: Sequence[int]) -> list[list[Pose]]:
    """Collaborator poses as the ego believes them: N(0, sigma^2) on x, y (m) and yaw (deg)."""
    out = []
    for sid, ps in zip(scene_ids, poses):
        rng = np.random.default_rng([seed, int(sid)])
        z = rng.standard_normal((len(ps), 3))
        out.append([Pose(p.x + sigma * z[a, 0], p.y + sigma * z[a, 1], p.yaw + math.radians(sigma) * z[a, 2])
                    for a, p in enumerate(ps)])
    return out


@torch.no_grad()
def evaluate_set(bundle: Bundle, cfg: ExperimentConfig, agents: Sequence[str], samples, method: str = "negotiated",
                 sigma: float = 0.0, seed: int = 0, threshold: float = 0.1, chunk: int = 32,
                 feats: dict[str, torch.Tensor] | None = None) -> dict[str, float]:
    """Loose/strict AP for ``agents`` collaborating with ``method``.

    Every slot layout of the set is evaluated with every slot as ego; AP is pooled
    over scenes per ego agent type, then averaged over ego types.  Mixed sets also
    report each ego type's AP under ``"loose:<agent>"`` / ``"strict:<agent>"``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if len(agents) == 1:
        method = "none"  # a lone agent has nobody to share with
    members = list(dict.fromkeys(agents))
    for m in members:
        if m not in bundle.agents:
            raise StageOrderError(f"no checkpoints loaded for {m}")
    n_agents = cfg.data.n_agents
    layouts = slot_assignments(members, n_agents)
    feats = feats or {m: encode_dataset(bundle.agents[m], samples) for m in members}
    extent = cfg.data.grid_extent
    per_type: dict[str, list] = {m: [] for m in members}
    for start in range(0, len(samples), chunk):
        ids = list(range(start, min(start + chunk, len(samples))))
        poses = [samples[i].poses for i in ids]
        noisy = believed_poses(poses, sigma, seed, ids) if sigma > 0 else None
        for types in layouts:
            f = [feats[t][ids, a] for a, t in enumerate(types)]
            for ego, t in enumerate(types):
                logits = collab_logits(bundle, types, f, poses, ego, extent, method=method, believed=noisy)
                for k, i in enumerate(ids):
                    det = detect(None, logits=logits[k], extent=extent, threshold=threshold)
                    per_type[t].append((det.peaks, samples[i].centers[ego]))
    out = {}
    for name, radius in (("loose", LOOSE_RADIUS), ("strict", STRICT_RADIUS)):
        per_ego = {m: pooled_ap(per_type[m], radius) for m in members}
        out[name] = float(np.mean(list(per_ego.values())))
        if len(members) > 1:
            out.update({f"{name}:{m}": float(v) for m, v in per_ego.items()})
    return out


def _checkpoint_hashes(ws: Workspace) -> dict[str, str]:
    roots = {ws.root, ws.step0_root}
    return {str(p): hashlib.sha256(p.read_bytes()).hexdigest() for r in roots for p in sorted(Path(r).rglob("*.npz"))}


def run_collab_eval(ws: Workspace, agent_sets: Iterable[Sequence[str]], methods: Sequence[str] = ("negotiated", "none"),
                    noise_sigma: float = 0.0, split: str = "test", adapted: bool = True, label: str = "eval",
                    report: MetricsReport | None = None) -> MetricsReport:
    """Evaluate several agent sets; checkpoints are read-only (verified by file hash)."""
    cfg = ws.config
    before = _checkpoint_hashes(ws)
    samples = dataset_for(cfg, split)
    agent_sets = [list(s) for s in agent_sets]
    needed = sorted({a for s in agent_sets for a in s})
    bundle = load_bundle(ws, needed, adapted=adapted)
    feats = {m: encode_dataset(bundle.agents[m], samples) for m in needed}
    rep = report or MetricsReport(cfg.hash(), cfg.seeds.eval, label)
    for agents in agent_sets:
        for method in methods:
            if method == "native" and len(set(agents)) > 1:
                continue
            if len(agents) == 1 and method != "none":
                continue
            rep.ap[ap_key(agents, method) + (f"@{noise_sigma:g}" if noise_sigma else "")] = evaluate_set(
                bundle, cfg, agents, samples, method, noise_sigma, cfg.seeds.eval, feats=feats)
    if _checkpoint_hashes(ws) != before:
        raise RuntimeError("evaluation modified a checkpoint file")
    rep.freeze = {k: v["passed"] for k, v in ws.freeze_reports().items()}
    rep.validate()
    return rep


def noise_sweep(ws: Workspace, agents: Sequence[str], sigmas: Sequence[float] | None = None,
                methods: Sequence[str] = ("negotiated",), split: str = "test") -> dict[str, list[dict[str, float]]]:
    cfg = ws.config
    sigmas = list(cfg.noise_sigmas if sigmas is None else sigmas)
    samples = dataset_for(cfg, split)
    bundle = load_bundle(ws, sorted(set(agents)))
    feats = {m: encode_dataset(bundle.agents[m], samples) for m in set(agents)}
    out = {}
    for method in methods:
        curve = []
        for s in sigmas:
            ap = evaluate_set(bundle, cfg, agents, samples, method, s, cfg.seeds.eval, feats=feats)
            curve.append({"sigma": float(s), **ap})
        out[f"{'+'.join(agents)}/{method}"] = curve
    return out


@torch.no_grad()
def domain_gap(ws: Workspace, split: str = "test", n_scenes: int = 64) -> dict[str, dict[str, float]]:
    """Per alliance member: KL(P || U_m) for the negotiated P and KL(protocol F || U_m).

    ``U_m`` is the member's resized local feature; the protocol agent's native
    output already has the standard shape.
    """
    cfg = ws.config
    if not cfg.ablation.use_negotiator:
        raise StageOrderError("the domain-gap study needs a negotiator")
    samples = dataset_for(cfg, split)[:n_scenes]
    bundle = load_bundle(ws, cfg.alliance, adapted=False)
    proto = load_agent(ws, cfg.protocol)
    if proto.spec.native_shape != cfg.standard.shape:
        raise ValueError("protocol agent's native shape must equal the standard representation")
    u = {m: bundle.resizers[m](encode_dataset(bundle.agents[m], samples).flatten(0, 1)) for m in cfg.alliance}
    p = bundle.negotiator(u)
    f_proto = encode_dataset(proto, samples).flatten(0, 1)
    return {m: {"negotiated": kl_domain_gap(p, u[m]), "protocol": kl_domain_gap(f_proto, u[m])}
            for m in cfg.alliance}


# -- ablation grid ----------------------------------------------------------------------

# rows follow the training-setting ablation table: negotiator off/on x uni-loss terms
ABLATION_ROWS = [
    {"use_negotiator": n, "use_stru": s, "use_pragma": p}
    for n in (False, True) for (s, p) in ((False, False), (True, False), (False, True), (True, True))
]


def ablation_name(row: dict) -> str:
    terms = ["dis"] + (["stru"] if row["use_stru"] else []) + (["pragma"] if row["use_pragma"] else [])
    return f"{'nego' if row['use_negotiator'] else 'no-nego'}:{'+'.join(terms)}"


def run_ablation(base: ExperimentConfig, root: str | Path, step0_root: str | Path, rows: Sequence[dict] = ABLATION_ROWS,
                 seeds: Sequence[int] = (0,), steps: int | None = None, split: str = "val") -> list[dict]:
    """Stage-1-only runs per (row, seed); each is scored on heterogeneous alliance AP.

    Step-0 agents are shared across rows; only the training seed varies.
    """
    out = []
    for row in rows:
        for seed in seeds:
            cfg = base.with_overrides({**{f"ablation.{k}": v for k, v in row.items()}, "seeds.train": seed})
            ws = Workspace(Path(root) / f"{ablation_name(row).replace(':', '_').replace('+', '-')}_s{seed}", cfg,
                           step0_root=step0_root)
            stage1_negotiate(ws, steps=steps)
            samples = dataset_for(cfg, split)
            bundle = load_bundle(ws, cfg.alliance, adapted=False)
            ap = evaluate_set(bundle, cfg, cfg.alliance, samples, "negotiated", seed=cfg.seeds.eval)
            out.append({**row, "name": ablation_name(row), "seed": seed, **ap})
    return out


def ablation_means(results: Sequence[dict]) -> dict[str, dict[str, float]]:
    groups: dict[str, list[dict]] = {}
    for r in results:
        groups.setdefault(r["name"], []).append(r)
    return {k: {"loose": float(np.mean([r["loose"] for r in v])), "strict": float(np.mean([r["strict"] for r in v])),
                "n": len(v)} for k, v in groups.items()}


# -- report emission ------------------------------------------------------------------------

def _replicates(reports: Sequence[MetricsReport]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for r in reports:
        groups.setdefault(r.config_hash, []).append(r.run_id)
    return {h: ids for h, ids in groups.items() if len(ids) > 1}


def _md_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        lines.append("| " + " | ".join(f"{x:.3f}" if isinstance(x, float) else str(x) for x in r) + " |")
    return "\n".join(lines)


def _tick(flag: bool) -> str:
    return "x" if flag else ""


def render_markdown(reports: Sequence[MetricsReport]) -> str:
    reps = _replicates(reports)
    parts = ["# Collaboration report", ""]
    for r in reports:
        rep_of = reps.get(r.config_hash)
        parts += [f"## Run {r.run_id} ({r.label or 'unlabelled'})", "",
                  f"config `{r.config_hash}`, seed {r.seed}" + (f", replicates: {', '.join(rep_of)}" if rep_of else ""), ""]
        if r.ap:
            hetero = [(k.split("/")[0], k.split("/")[1], v["loose"], v["strict"]) for k, v in sorted(r.ap.items())
                      if len(set(k.split("/")[0].split("+"))) != 1 or "+" not in k.split("/")[0]]
            homo = [(k.split("/")[0], k.split("/")[1], v["loose"], v["strict"]) for k, v in sorted(r.ap.items())
                    if "+" in k.split("/")[0] and len(set(k.split("/")[0].split("+"))) == 1]
            if hetero:
                parts += ["### Heterogeneous collaboration", "",
                          _md_table(["agents", "method", "AP@loose", "AP@strict"], hetero), ""]
            if homo:
                parts += ["### Homogeneous collaboration", "",
                          _md_table(["agents", "sharing", "AP@loose", "AP@strict"], homo), ""]
        if r.kl:
            parts += ["### Domain gap (KL to local representation)", "",
                      _md_table(["modality", "negotiated", "protocol", "reduction"],
                                [(m, v["negotiated"], v["protocol"], 1 - v["negotiated"] / max(v["protocol"], 1e-12))
                                 for m, v in sorted(r.kl.items())]), ""]
        if r.noise:
            rows = [(k, c["sigma"], c["loose"], c["strict"]) for k, curve in sorted(r.noise.items()) for c in curve]
            parts += ["### Pose-noise sweep", "", _md_table(["agents/method", "sigma", "AP@loose", "AP@strict"], rows), ""]
        if r.ablation:
            means = ablation_means(r.ablation)
            rows = []
            for row in ABLATION_ROWS:
                name = ablation_name(row)
                m = means.get(name)
                rows.append((_tick(row["use_negotiator"]), "x", _tick(row["use_stru"]), _tick(row["use_pragma"]),
                             m["loose"] if m else "-", m["strict"] if m else "-", m["n"] if m else 0))
            parts += ["### Training-setting ablation", "",
                      _md_table(["negotiator", "dis", "stru", "pragma", "AP@loose", "AP@strict", "seeds"], rows), ""]
        if r.freeze:
            parts += ["### Freeze manifests", "",
                      _md_table(["stage", "passed"], sorted((k, str(v)) for k, v in r.freeze.items())), ""]
    return "\n".join(parts)


def emit_report(reports: Sequence[MetricsReport], out_dir: str | Path) -> list[Path]:
    """Write report.json, report.md and plots; returns the written paths."""
    if not reports:
        raise ValueError("nothing to report")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    payload = {"schema": REPORT_SCHEMA + "+list", "reports": [r.to_dict() for r in reports],
               "replicates": _replicates(reports)}
    p = out / "report.json"
    p.write_text(json.dumps(payload, indent=2, sort_keys=True))
    files.append(p)
    p = out / "report.md"
    p.write_text(render_markdown(reports))
    files.append(p)

    for r in reports:
        if r.ap:
            fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(r.ap)), 3))
            keys = sorted(r.ap)
            ax.bar(range(len(keys)), [r.ap[k]["loose"] for k in keys], label="loose")
            ax.bar(range(len(keys)), [r.ap[k]["strict"] for k in keys], width=0.5, label="strict")
            ax.set_xticks(range(len(keys)), keys, rotation=45, ha="right", fontsize=7)
            ax.set_ylabel("AP")
            ax.set_ylim(0, 1)
            ax.legend()
            fig.tight_layout()
            files.append(_save(fig, out / f"ap_{r.run_id}.png"))
        if r.noise:
            fig, ax = plt.subplots(figsize=(4, 3))
            for k, curve in sorted(r.noise.items()):
                ax.plot([c["sigma"] for c in curve], [c["loose"] for c in curve], marker="o", label=k)
            ax.set_xlabel("pose noise sigma (m / deg)")
            ax.set_ylabel("AP@loose")
            ax.legend(fontsize=7)
            fig.tight_layout()
            files.append(_save(fig, out / f"noise_{r.run_id}.png"))
        if r.kl:
            fig, ax = plt.subplots(figsize=(4, 3))
            mods = sorted(r.kl)
            x = np.arange(len(mods))
            ax.bar(x - 0.2, [r.kl[m]["protocol"] for m in mods], 0.4, label="protocol")
            ax.bar(x + 0.2, [r.kl[m]["negotiated"] for m in mods], 0.4, label="negotiated")
            ax.set_xticks(x, mods)
            ax.set_ylabel("KL to local")
            ax.legend()
            fig.tight_layout()
            files.append(_save(fig, out / f"domain_gap_{r.run_id}.png"))
        if r.ablation:
            means = ablation_means(r.ablation)
            names = [ablation_name(row) for row in ABLATION_ROWS if ablation_name(row) in means]
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.bar(range(len(names)), [means[n]["loose"] for n in names])
            ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=7)
            ax.set_ylabel("AP@loose")
            fig.tight_layout()
            files.append(_save(fig, out / f"ablation_{r.run_id}.png"))
    return files


def _save(fig, path: Path) -> Path:
    import matplotlib.pyplot as plt

    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def load_reports(path: str | Path) -> list[MetricsReport]:
    d = json.loads(Path(path).read_text())
    if "reports" in d:
        return [MetricsReport.from_dict(r) for r in d["reports"]]
    return [MetricsReport.from_dict(d)]


def module_hashes(bundle: Bundle) -> dict[str, str]:
    return {k: param_hash(m) for k, m in bundle.named_modules_flat().items()}
