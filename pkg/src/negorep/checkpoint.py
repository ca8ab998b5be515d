"""Checkpoint container and parameter-hash freeze manifests.

A checkpoint is an uncompressed ``.npz`` archive.  Every weight tensor is stored
under ``param/<state-dict key>``; the entry ``__meta__`` holds a UTF-8 JSON
object with at least ``kind``, ``param_hash`` and ``config_hash`` (plus, for
agent checkpoints, the serialized ``AgentSpec``).  Files are written to a
temporary sibling and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_SCHEMA = "negorep.checkpoint/v1"


class CheckpointError(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    def __init__(self, report: "FreezeReport"):
        super().__init__(f"frozen modules changed: {', '.join(report.mismatches)}")
        self.report = report


def param_hash(module: nn.Module | Mapping[str, torch.Tensor]) -> str:
    state = module.state_dict() if isinstance(module, nn.Module) else module
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, module: nn.Module, meta: dict | None = None) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    digest = param_hash(state)
    meta = {"schema": CHECKPOINT_SCHEMA, **(meta or {}), "param_hash": digest}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_SCHEMA} file")
    if param_hash(state) != meta["param_hash"]:
        raise CheckpointError(f"{path}: stored weights do not match their recorded hash")
    return state, meta


def load_into(module: nn.Module, path: str | Path) -> dict:
    state, meta = read_checkpoint(path)
    module.load_state_dict(state)
    return meta


@dataclass
class FreezeReport:
    passed: bool
    mismatches: list[str] = field(default_factory=list)
    checked: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.passed

    def to_dict(self) -> dict:
        return {"passed": self.passed, "mismatches": list(self.mismatches), "checked": list(self.checked)}


@dataclass
class FreezeManifest:
    """Hashes of every module declared frozen for a stage, captured at stage start."""

    stage: str
    hashes: dict[str, str]
    modules: dict[str, nn.Module] = field(default_factory=dict, repr=False)

    @classmethod
    def capture(cls, stage: str, modules: Mapping[str, nn.Module]) -> "FreezeManifest":
        return cls(stage, {k: param_hash(m) for k, m in modules.items()}, dict(modules))

    def to_dict(self) -> dict:
        return {"stage": self.stage, "hashes": dict(self.hashes)}


def verify_frozen(manifest: FreezeManifest, modules: Mapping[str, nn.Module] | None = None) -> FreezeReport:
    modules = manifest.modules if modules is None else modules
    bad = []
    for name, digest in manifest.hashes.items():
        if name not in modules or param_hash(modules[name]) != digest:
            bad.append(name)
    return FreezeReport(passed=not bad, mismatches=bad, checked=list(manifest.hashes))
