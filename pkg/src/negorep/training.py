"""Three-step protocol: Step 0 pretraining, Step 1 alliance negotiation (stage 1 + stage 2),
Step 2 new-agent join.  Every stage captures a freeze manifest and verifies it on exit."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .agents import (AgentModel, AgentSpec, TrainingDiverged, center_targets, train_homogeneous,
                     warp_features)
from .bridge import Receiver, Resizer, Sender
from .checkpoint import (CheckpointError, FreezeManifest, FreezeViolation, load_into, param_hash,
                         read_checkpoint, save_checkpoint, verify_frozen)
from .config import ExperimentConfig
from .losses import (OccupancyHead, cycle_loss, detection_loss, keypoint_grid, multidim_align_loss,
                     stage1_loss)
from .negotiator import Negotiator
from .scenegen import Pose, Sample, make_dataset

log = logging.getLogger(__name__)

OUT_ENV = "NEGOREP_OUT"
Hook = Callable[[int, dict], None]


class StageOrderError(RuntimeError):
    pass


# -- data ------------------------------------------------------------------------

_DATA_CACHE: dict[str, list[Sample]] = {}


def dataset_for(cfg: ExperimentConfig, split: str) -> list[Sample]:
    """Deterministic train / val / test splits rendering every roster modality."""
    d = cfg.data
    n = {"train": d.n_train, "val": d.n_val, "test": d.n_test}[split]
    offset = {"train": 0, "val": 1, "test": 2}[split]
    mods = sorted(cfg.modalities(), key=lambda m: m.name)
    key = json.dumps([split, n, cfg.seeds.data, asdict(d), [asdict(m) for m in mods], cfg.label_grid.resolution],
                     sort_keys=True, default=str)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = make_dataset(n, cfg.seeds.data * 10 + offset + 1, mods, cfg.label_grid,
                                        n_agents=d.n_agents, n_objects=(d.min_objects, d.max_objects),
                                        world_extent=d.world_extent)
    return _DATA_CACHE[key]


@torch.no_grad()
def encode_dataset(model: AgentModel, samples: Sequence[Sample], chunk: int = 64) -> torch.Tensor:
    """(N, n_agents, C, H, W) frozen encoder outputs for every viewpoint."""
    name = model.spec.modality.name
    obs = torch.from_numpy(np.stack([s.observations[name] for s in samples]))
    n, a = obs.shape[:2]
    flat = obs.reshape(n * a, *obs.shape[2:])
    out = torch.cat([model.encode(flat[i:i + chunk]) for i in range(0, len(flat), chunk)])
    return out.reshape(n, a, *out.shape[1:])


# -- workspace -------------------------------------------------------------------

@dataclass
class Workspace:
    """Directory layout for one experiment.  ``step0_root`` lets runs share pretrained agents."""

    root: Path
    config: ExperimentConfig
    step0_root: Path | None = None

    def __post_init__(self):
        self.root = Path(self.root)
        self.step0_root = Path(self.step0_root) if self.step0_root else self.root
        self.root.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_env(cls, config: ExperimentConfig, default: str = "runs/default") -> "Workspace":
        return cls(Path(os.environ.get(OUT_ENV, default)), config)

    def agent_path(self, agent_id: str) -> Path:
        return self.step0_root / "step0" / f"{agent_id}.npz"

    def path(self, stage: str, name: str) -> Path:
        return self.root / stage / f"{name}.npz"

    def log_path(self, stage: str) -> Path:
        return self.root / "logs" / f"{stage}.jsonl"

    def write_freeze_report(self, manifest: FreezeManifest, report) -> None:
        p = self.root / "manifests" / f"{manifest.stage}.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({**manifest.to_dict(), "report": report.to_dict()}, indent=2, sort_keys=True))

    def freeze_reports(self) -> dict[str, dict]:
        d = self.root / "manifests"
        if not d.exists():
            return {}
        return {p.stem: json.loads(p.read_text())["report"] for p in sorted(d.glob("*.json"))}

    def meta(self, **extra) -> dict:
        return {"config_hash": self.config.hash(), **extra}


class _JsonlLog:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _freeze(*modules: nn.Module):
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


# -- Step 0 --------------------------------------------------------------------------

def pretrain(ws: Workspace, agent_ids: Iterable[str] | None = None) -> dict[str, dict]:
    cfg = ws.config
    agent_ids = list(agent_ids or cfg.roster)
    train = dataset_for(cfg, "train")
    out = {}
    for i, aid in enumerate(agent_ids):
        spec = cfg.roster[aid]
        logger = _JsonlLog(ws.log_path(f"step0_{aid}"))
        try:
            model, records = train_homogeneous(
                spec, train, steps=cfg.optim.steps_step0, seed=cfg.seeds.train * 1000 + i,
                lr=cfg.optim.lr, batch_size=cfg.optim.batch_size, extent=cfg.data.grid_extent, on_log=logger)
        finally:
            logger.close()
        first = float(np.mean([r["loss"] for r in records[:10]]))
        last = float(np.mean([r["loss"] for r in records[-10:]]))
        meta = ws.meta(kind="agent", spec=asdict(spec), steps=len(records), first_loss=first, final_loss=last)
        save_checkpoint(ws.agent_path(aid), model, meta)
        out[aid] = meta
        log.info("step0 %s: loss %.4f -> %.4f", aid, first, last)
    return out


def load_agent(ws: Workspace, agent_id: str) -> AgentModel:
    path = ws.agent_path(agent_id)
    if not path.exists():
        raise StageOrderError(f"no Step-0 checkpoint for {agent_id} at {path}")
    model = AgentModel(ws.config.roster[agent_id])
    meta = load_into(model, path)
    spec = ws.config.roster[agent_id]
    saved = meta.get("spec", {})
    if (saved.get("encoder_arch"), saved.get("width"), saved.get("stride")) != (spec.encoder_arch, spec.width, spec.stride):
        raise CheckpointError(f"{path} was trained for a different AgentSpec")
    _freeze(model)
    return model


# -- bundles -----------------------------------------------------------------------------

@dataclass
class Bundle:
    """Every module a collaboration run needs, keyed by agent id."""

    agents: dict[str, AgentModel] = field(default_factory=dict)
    senders: dict[str, Sender] = field(default_factory=dict)
    receivers: dict[str, Receiver] = field(default_factory=dict)
    resizers: dict[str, Resizer] = field(default_factory=dict)
    negotiator: Negotiator | None = None
    occ_head: OccupancyHead | None = None

    def named_modules_flat(self) -> dict[str, nn.Module]:
        out = {}
        for aid, m in self.agents.items():
            out[f"{aid}.encoder"] = m.encoder
            out[f"{aid}.fusion"] = m.fusion
            out[f"{aid}.head"] = m.head
        for kind in ("senders", "receivers", "resizers"):
            for aid, m in getattr(self, kind).items():
                out[f"{aid}.{kind[:-1]}"] = m
        if self.negotiator is not None:
            out["negotiator"] = self.negotiator
        if self.occ_head is not None:
            out["occ_head"] = self.occ_head
        return out


def new_bridge(cfg: ExperimentConfig, agent_id: str) -> tuple[Sender, Receiver]:
    spec = cfg.roster[agent_id]
    return (Sender(spec.native_shape, cfg.standard),
            Receiver(spec.native_shape, cfg.standard, use_local_prompt=cfg.ablation.use_local_prompt))


def negotiation_resizer(cfg: ExperimentConfig, agent_id: str) -> Resizer:
    """Maps an alliance member's local feature F to the standardized U fed to the negotiator."""
    return Resizer(cfg.roster[agent_id].native_channels, cfg.standard.channels,
                   (cfg.standard.height, cfg.standard.width), standardize=cfg.pyramid.standardize_inputs)


def _stage1_names(cfg: ExperimentConfig) -> list[str]:
    names = []
    for aid in cfg.alliance:
        names += [f"sender_{aid}", f"receiver_{aid}"]
        if cfg.ablation.use_negotiator:
            names.append(f"resizer_{aid}")
    if cfg.ablation.use_negotiator:
        names.append("negotiator")
    names.append("occ_head")
    return names


def stage1_done(ws: Workspace) -> bool:
    return all(ws.path("stage1", n).exists() for n in _stage1_names(ws.config))


def load_bundle(ws: Workspace, agent_ids: Iterable[str], adapted: bool = True) -> Bundle:
    """Load agents plus the newest sender/receiver available for each.

    Alliance members come from stage 1 (receivers from stage 2 when ``adapted``);
    joined agents from their join stages.
    """
    cfg = ws.config
    b = Bundle()
    if not stage1_done(ws):
        raise StageOrderError("stage-1 checkpoints are missing; run negotiation first")
    b.occ_head = OccupancyHead(cfg.standard.channels)
    load_into(b.occ_head, ws.path("stage1", "occ_head"))
    if cfg.ablation.use_negotiator:
        b.negotiator = Negotiator(cfg.standard, cfg.pyramid)
        load_into(b.negotiator, ws.path("stage1", "negotiator"))
    for aid in agent_ids:
        b.agents[aid] = load_agent(ws, aid)
        s, r = new_bridge(cfg, aid)
        if aid in cfg.alliance:
            load_into(s, ws.path("stage1", f"sender_{aid}"))
            rp = ws.path("stage2", f"receiver_{aid}")
            load_into(r, rp if adapted and rp.exists() else ws.path("stage1", f"receiver_{aid}"))
            if cfg.ablation.use_negotiator:
                z = negotiation_resizer(cfg, aid)
                load_into(z, ws.path("stage1", f"resizer_{aid}"))
                b.resizers[aid] = z
        else:
            sp, rp1, rp2 = (ws.path(f"join/{aid}", n) for n in ("sender", "receiver", "receiver_adapted"))
            if not sp.exists():
                raise StageOrderError(f"{aid} has not joined the alliance yet")
            load_into(s, sp)
            load_into(r, rp2 if adapted and rp2.exists() else rp1)
        b.senders[aid], b.receivers[aid] = s, r
    for m in b.named_modules_flat().values():
        _freeze(m)
    return b


# -- shared forward pieces ----------------------------------------------------------------

def stage1_forward(cfg: ExperimentConfig, bundle: Bundle, members: Sequence[str], feats: dict[str, torch.Tensor],
                   occupancy: torch.Tensor, keypoints: torch.Tensor, trainable: Sequence[str] | None = None,
                   common: torch.Tensor | None = None):
    """Stage-1 loss over the paired views in ``feats`` (one (V, C, H, W) tensor per agent).

    ``common`` supplies a precomputed P (join); otherwise it comes from the negotiator
    over ``members`` or, with the negotiator ablated, the mean of the sender outputs.
    """
    w = cfg.weights
    ab = cfg.ablation
    trainable = list(members if trainable is None else trainable)
    sent = {m: bundle.senders[m](feats[m]) for m in trainable}
    if common is not None:
        p = common
    elif ab.use_negotiator:
        p = bundle.negotiator({m: bundle.resizers[m](feats[m]) for m in members})
    else:
        p = torch.stack([sent[m][1] for m in members]).mean(0)
    teacher = p.detach() if w.teacher_stop_grad else p
    terms, parts = [], {}
    for m in trainable:
        r, p_m = sent[m]
        restored = bundle.receivers[m](r, p)
        cyc = cycle_loss(feats[m], restored, w.beta)
        uni, up = multidim_align_loss(p_m, teacher, occupancy, bundle.occ_head, w, keypoints,
                                      use_stru=ab.use_stru, use_pragma=ab.use_pragma, return_parts=True)
        terms.append({"cycle": cyc, "uni": uni})
        parts[f"{m}.cycle"] = cyc
        parts[f"{m}.uni"] = uni
        for k, v in up.items():
            parts[f"{m}.{k}"] = v
    if common is not None:
        # P is fixed while joining, so its own pragmatic term carries no gradient
        total = sum(w.lambda_c * t["cycle"] + w.lambda_u * t["uni"] for t in terms)
    else:
        total, extra = stage1_loss(terms, p, occupancy, bundle.occ_head, w, return_parts=True)
        parts.update(extra)
    return total, parts


def collab_logits(bundle: Bundle, types: Sequence[str], feats: Sequence[torch.Tensor], poses: Sequence[Sequence[Pose]],
                  ego: int, extent: float, method: str = "negotiated",
                  believed: Sequence[Sequence[Pose]] | None = None) -> torch.Tensor:
    """Inference dataflow for the agent in slot ``ego``.

    ``types[a]`` names the agent type in slot ``a`` and ``feats[a]`` its (B, C, H, W)
    encoder output.  ``method`` is ``negotiated`` (common space), ``native`` (direct
    local-feature sharing, same type only) or ``none``.  ``believed`` replaces the
    collaborators' poses used for warping (pose noise).
    """
    ego_t = types[ego]
    agent = bundle.agents[ego_t]
    received = []
    if method != "none":
        r_ego = None
        for a in range(len(types)):
            if a == ego:
                continue
            src = [p[a] for p in (believed if believed is not None else poses)]
            dst = [p[ego] for p in poses]
            if method == "native":
                if types[a] != ego_t:
                    raise ValueError("native sharing needs collaborators of the same type")
                received.append(warp_features(feats[a], src, dst, extent))
                continue
            if r_ego is None and bundle.receivers[ego_t].use_local_prompt:
                r_ego = bundle.senders[ego_t](feats[ego])[0]
            _, p_a = bundle.senders[types[a]](feats[a])
            p_w = warp_features(p_a, src, dst, extent)
            received.append(bundle.receivers[ego_t](r_ego, p_w))
    return agent.head(agent.fusion(feats[ego], received))


def slot_assignments(members: Sequence[str], n_agents: int) -> list[tuple[str, ...]]:
    """Agent-type layouts over the viewpoint slots used for collaborative training."""
    if len(members) == 1:
        return [tuple(members) * n_agents]
    if n_agents != 2:
        return [tuple(members[(i + k) % len(members)] for i in range(n_agents)) for k in range(len(members))]
    return [(a, b) for a in members for b in members if a != b]


def _batches(n: int, batch_size: int, steps: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        yield np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


def _flat(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(0, 1)


def _check_finite(loss: torch.Tensor, stage: str, step: int):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{stage}: loss became {loss.item()} at step {step}")


def _finish_stage(ws: Workspace, manifest: FreezeManifest) -> dict:
    report = verify_frozen(manifest)
    ws.write_freeze_report(manifest, report)
    if not report.passed:
        raise FreezeViolation(report)
    return report.to_dict()


def _run_hooks(hooks: Sequence[Hook], step: int, ctx: dict):
    for h in hooks:
        h(step, ctx)


# -- Step 1, stage 1 -------------------------------------------------------------------------

def stage1_negotiate(ws: Workspace, hooks: Sequence[Hook] = (), steps: int | None = None) -> dict:
    """Negotiate the common representation and train the alliance's senders/receivers."""
    cfg = ws.config
    members = list(cfg.alliance)
    steps = cfg.optim.steps_stage1 if steps is None else steps
    agents = {m: load_agent(ws, m) for m in members}
    train, val = dataset_for(cfg, "train"), dataset_for(cfg, "val")
    feats = {m: encode_dataset(agents[m], train) for m in members}
    vfeats = {m: _flat(encode_dataset(agents[m], val[:8])) for m in members}
    occ = torch.from_numpy(np.stack([s.occupancy for s in train]))
    vocc = _flat(torch.from_numpy(np.stack([s.occupancy for s in val[:8]])))
    kp = keypoint_grid(cfg.standard.height, cfg.standard.width)

    torch.manual_seed(cfg.seeds.train * 1000 + 101)
    b = Bundle(agents=agents)
    for m in members:
        b.senders[m], b.receivers[m] = new_bridge(cfg, m)
        if cfg.ablation.use_negotiator:
            b.resizers[m] = negotiation_resizer(cfg, m)
    if cfg.ablation.use_negotiator:
        b.negotiator = Negotiator(cfg.standard, cfg.pyramid)
    b.occ_head = OccupancyHead(cfg.standard.channels)

    frozen = {k: v for k, v in b.named_modules_flat().items() if k.rsplit(".", 1)[-1] in ("encoder", "fusion", "head")}
    trained = {k: v for k, v in b.named_modules_flat().items() if k not in frozen}
    manifest = FreezeManifest.capture("stage1", frozen)
    params = [p for m in trained.values() for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.optim.lr)
    logger = _JsonlLog(ws.log_path("stage1"))
    best, history = float("inf"), []
    try:
        for step, idx in enumerate(_batches(len(train), cfg.optim.bridge_batch, steps, cfg.seeds.train * 1000 + 1)):
            f = {m: _flat(feats[m][idx]) for m in members}
            loss, parts = stage1_forward(cfg, b, members, f, _flat(occ[idx]), kp)
            _check_finite(loss, "stage1", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec = {"stage": "stage1", "step": step, "loss": loss.item(), **{k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}}
            if cfg.optim.validate_every and (step + 1) % cfg.optim.validate_every == 0:
                with torch.no_grad():
                    vloss = float(stage1_forward(cfg, b, members, vfeats, vocc, kp)[0])
                rec["val_loss"] = vloss
                if vloss < best:
                    best = vloss
                    for name, mod in trained.items():
                        save_checkpoint(ws.path("stage1/best", _ckpt_name(name)), mod, ws.meta(kind=name, step=step))
            logger(rec)
            history.append(rec["loss"])
            _run_hooks(hooks, step, {"frozen": frozen, "trained": trained, "bundle": b})
    finally:
        logger.close()
    freeze = _finish_stage(ws, manifest)
    for name, mod in trained.items():
        save_checkpoint(ws.path("stage1", _ckpt_name(name)), mod, ws.meta(kind=name, steps=steps))
    return {"stage": "stage1", "losses": history, "freeze": freeze, "best_val": best}


def _ckpt_name(flat_name: str) -> str:
    """'m1.sender' -> 'sender_m1'; singletons keep their name."""
    if "." not in flat_name:
        return flat_name
    aid, kind = flat_name.split(".")
    return f"{kind}_{aid}"


# -- Step 1, stage 2 -------------------------------------------------------------------------

def _collab_train(ws: Workspace, stage: str, b: Bundle, members_for_feats: Sequence[str],
                  assignments: Sequence[tuple[str, ...]], trainable: dict[str, nn.Module], steps: int,
                  hooks: Sequence[Hook], seed_offset: int, ego_filter: Callable[[str], bool] | None = None) -> list[float]:
    cfg = ws.config
    train = dataset_for(cfg, "train")
    feats = {m: encode_dataset(b.agents[m], train) for m in members_for_feats}
    centers = [s.centers for s in train]
    extent = cfg.data.grid_extent
    for m in trainable.values():
        m.train()
        for p in m.parameters():
            p.requires_grad_(True)
    opt = torch.optim.Adam([p for m in trainable.values() for p in m.parameters()], lr=cfg.optim.lr)
    logger = _JsonlLog(ws.log_path(stage))
    history = []
    try:
        for step, idx in enumerate(_batches(len(train), cfg.optim.bridge_batch, steps,
                                            cfg.seeds.train * 1000 + seed_offset)):
            poses = [train[i].poses for i in idx]
            total, parts = 0.0, {}
            for types in assignments:
                f = [feats[t][idx, a] for a, t in enumerate(types)]
                for ego, t in enumerate(types):
                    if ego_filter is not None and not ego_filter(t):
                        continue
                    logits = collab_logits(b, types, f, poses, ego, extent)
                    size = cfg.roster[t].native_size[0]
                    heat, offs = center_targets([centers[i][ego] for i in idx], size, extent)
                    l = detection_loss(logits, heat, offs)
                    total = total + l
                    key = f"{t}<-{'+'.join(x for k, x in enumerate(types) if k != ego)}"
                    parts[key] = parts.get(key, 0.0) + l.item()
            loss = total
            _check_finite(loss, stage, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            logger({"stage": stage, "step": step, "loss": loss.item(), **parts})
            history.append(loss.item())
            _run_hooks(hooks, step, {"trainable": trainable, "bundle": b})
    finally:
        logger.close()
    for m in trainable.values():
        _freeze(m)
    return history


def stage2_adapt(ws: Workspace, hooks: Sequence[Hook] = (), steps: int | None = None) -> dict:
    """Fine-tune only the alliance receivers on the collaborative detection loss."""
    cfg = ws.config
    if not stage1_done(ws):
        raise StageOrderError("stage 2 needs stage-1 checkpoints")
    members = list(cfg.alliance)
    b = load_bundle(ws, members, adapted=False)
    trainable = {f"{m}.receiver": b.receivers[m] for m in members}
    frozen = {k: v for k, v in b.named_modules_flat().items() if k not in trainable}
    manifest = FreezeManifest.capture("stage2", frozen)
    steps = cfg.optim.steps_stage2 if steps is None else steps
    torch.manual_seed(cfg.seeds.train * 1000 + 202)
    hist = _collab_train(ws, "stage2", b, members, slot_assignments(members, cfg.data.n_agents), trainable,
                         steps, hooks, seed_offset=2)
    freeze = _finish_stage(ws, manifest)
    for m in members:
        save_checkpoint(ws.path("stage2", f"receiver_{m}"), b.receivers[m], ws.meta(kind="receiver", steps=steps))
    return {"stage": "stage2", "losses": hist, "freeze": freeze}


# -- Step 2 -----------------------------------------------------------------------------------

def join_new_agent(ws: Workspace, agent_id: str, hooks: Sequence[Hook] = (), steps1: int | None = None,
                   steps2: int | None = None) -> dict:
    """Align a new agent to the frozen negotiated representation, then adapt its receiver."""
    cfg = ws.config
    if agent_id in cfg.alliance:
        raise ValueError(f"{agent_id} already belongs to the alliance")
    if not stage1_done(ws):
        raise StageOrderError("joining needs the alliance's negotiation checkpoints")
    if not cfg.ablation.use_negotiator:
        raise StageOrderError("joining needs a negotiator")
    members = list(cfg.alliance)
    b = load_bundle(ws, members, adapted=True)
    b.agents[agent_id] = load_agent(ws, agent_id)
    torch.manual_seed(cfg.seeds.train * 1000 + 303 + sorted(cfg.roster).index(agent_id))
    sender, receiver = new_bridge(cfg, agent_id)
    b.senders[agent_id], b.receivers[agent_id] = sender, receiver
    steps1 = cfg.optim.steps_join1 if steps1 is None else steps1
    steps2 = cfg.optim.steps_join2 if steps2 is None else steps2

    # join stage 1: sender + receiver against the fixed P
    trainable = {f"{agent_id}.sender": sender, f"{agent_id}.receiver": receiver}
    frozen = {k: v for k, v in b.named_modules_flat().items() if k not in trainable}
    manifest = FreezeManifest.capture(f"join1_{agent_id}", frozen)
    train = dataset_for(cfg, "train")
    feats = {m: encode_dataset(b.agents[m], train) for m in [*members, agent_id]}
    occ = torch.from_numpy(np.stack([s.occupancy for s in train]))
    kp = keypoint_grid(cfg.standard.height, cfg.standard.width)
    opt = torch.optim.Adam([p for m in trainable.values() for p in m.parameters()], lr=cfg.optim.lr)
    for m in trainable.values():
        m.train()
    logger = _JsonlLog(ws.log_path(f"join1_{agent_id}"))
    hist1 = []
    try:
        for step, idx in enumerate(_batches(len(train), cfg.optim.bridge_batch, steps1, cfg.seeds.train * 1000 + 3)):
            with torch.no_grad():
                p = b.negotiator({m: b.resizers[m](_flat(feats[m][idx])) for m in members})
            f = {agent_id: _flat(feats[agent_id][idx])}
            loss, parts = stage1_forward(cfg, b, members, f, _flat(occ[idx]), kp, trainable=[agent_id], common=p)
            _check_finite(loss, "join1", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            logger({"stage": f"join1_{agent_id}", "step": step, "loss": loss.item(),
                    **{k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}})
            hist1.append(loss.item())
            _run_hooks(hooks, step, {"frozen": frozen, "trained": trainable, "bundle": b})
    finally:
        logger.close()
    _freeze(sender, receiver)
    freeze1 = _finish_stage(ws, manifest)
    save_checkpoint(ws.path(f"join/{agent_id}", "sender"), sender, ws.meta(kind="sender", steps=steps1))
    save_checkpoint(ws.path(f"join/{agent_id}", "receiver"), receiver, ws.meta(kind="receiver", steps=steps1))

    # join stage 2: only the new receiver moves; alliance-ego terms are included but carry no gradient to it
    trainable = {f"{agent_id}.receiver": receiver}
    frozen = {k: v for k, v in b.named_modules_flat().items() if k not in trainable}
    manifest = FreezeManifest.capture(f"join2_{agent_id}", frozen)
    assignments = [(agent_id, m) for m in members] + [(m, agent_id) for m in members]
    if cfg.data.n_agents != 2:
        assignments = [tuple([agent_id] + [m] * (cfg.data.n_agents - 1)) for m in members]
    hist2 = _collab_train(ws, f"join2_{agent_id}", b, [*members, agent_id], assignments, trainable, steps2,
                          hooks, seed_offset=4)
    freeze2 = _finish_stage(ws, manifest)
    save_checkpoint(ws.path(f"join/{agent_id}", "receiver_adapted"), receiver,
                    ws.meta(kind="receiver", steps=steps2))
    return {"stage": "join", "agent": agent_id, "losses_stage1": hist1, "losses_stage2": hist2,
            "freeze": {"join1": freeze1, "join2": freeze2}}


def run_protocol(ws: Workspace, join: Iterable[str] | None = None, skip_pretrained: bool = True) -> dict:
    """Steps 0-2 end to end; pretrained agents already on disk are reused."""
    cfg = ws.config
    needed = list(dict.fromkeys([*cfg.alliance, *(cfg.new_agents if join is None else join)]))
    todo = [a for a in needed if not (skip_pretrained and ws.agent_path(a).exists())]
    out = {"step0": pretrain(ws, todo) if todo else {}}
    out["stage1"] = stage1_negotiate(ws)
    out["stage2"] = stage2_adapt(ws)
    out["join"] = {a: join_new_agent(ws, a) for a in (cfg.new_agents if join is None else join)}
    return out
