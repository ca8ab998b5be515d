"""Per-modality perception models and homogeneous (Step 0) training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scenegen import GridSpec, ModalitySpec, Pose, Sample

log = logging.getLogger(__name__)

ENCODER_ARCHS = ("convA", "convB", "convC", "convD")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    modality: ModalitySpec
    encoder_arch: str
    width: int
    depth: int = 3
    stride: int = 2
    kernel: int = 3
    input_size: int = 64

    def __post_init__(self):
        if self.encoder_arch not in ENCODER_ARCHS:
            raise ValueError(f"unknown encoder_arch {self.encoder_arch!r}")
        if self.stride not in (1, 2, 4, 8):
            raise ValueError("stride must be a power of two <= 8")
        if self.input_size % self.stride:
            raise ValueError("input_size must be divisible by stride")

    @property
    def native_channels(self) -> int:
        return self.width

    @property
    def native_size(self) -> tuple[int, int]:
        n = self.input_size // self.stride
        return (n, n)

    @property
    def native_shape(self) -> tuple[int, int, int]:
        return (self.native_channels, *self.native_size)


@dataclass
class FeatureMap:
    """A (C, H, W) or batched (B, C, H, W) feature grid plus the pose it lives in."""

    data: torch.Tensor
    frame: Pose | None = None

    def __post_init__(self):
        if not torch.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite entries")


@dataclass
class Detections:
    heatmap: torch.Tensor  # (H, W) probabilities
    offsets: torch.Tensor  # (2, H, W) sub-cell offsets in cell units
    peaks: list[tuple[float, float, float]] = field(default_factory=list)  # (x, y, score), ego meters


# -- networks ----------------------------------------------------------------

def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class _ResBlock(nn.Module):
    def __init__(self, c, k):
        super().__init__()
        self.a = _conv(c, c, k)
        self.b = _conv(c, c, k)

    def forward(self, x):
        return F.relu(x + self.b(F.relu(self.a(x))))


class Encoder(nn.Module):
    """Four toy encoder families; they differ in kernel, normalization and skip structure."""

    def __init__(self, spec: AgentSpec):
        super().__init__()
        w, k = spec.width, spec.kernel
        n_down = int(math.log2(spec.stride))
        layers: list[nn.Module] = []
        cin = 1
        if spec.encoder_arch in ("convA", "convB", "convD"):
            norm = spec.encoder_arch in ("convB", "convD")
            for i in range(max(spec.depth, n_down)):
                s = 2 if i < n_down else 1
                cout = w if i >= n_down - 1 else max(w // 2, 8)
                layers.append(_conv(cin, cout, k, s))
                if norm:
                    layers.append(nn.GroupNorm(min(4, cout), cout))
                layers.append(nn.ReLU())
                cin = cout
        else:  # convC: strided stem followed by residual blocks
            for i in range(max(n_down, 1)):
                layers += [_conv(cin, w, k, 2 if i < n_down else 1), nn.ReLU()]
                cin = w
            for _ in range(max(spec.depth - 1, 1)):
                layers.append(_ResBlock(w, k))
        self.net = nn.Sequential(*layers)
        self.spec = spec

    def forward(self, obs):
        return self.net(obs)


class MaxFusion(nn.Module):
    """Per-location channel max over {local, received...} then a 1x1 mixing conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.mix = nn.Conv2d(channels, channels, 1)
        with torch.no_grad():
            self.mix.weight.copy_(torch.eye(channels)[:, :, None, None])
            self.mix.bias.zero_()

    def forward(self, local, received: Sequence[torch.Tensor] = ()):
        for r in received:
            if r.shape != local.shape:
                raise ValueError(f"received feature {tuple(r.shape)} does not match local {tuple(local.shape)}")
        x = local
        for r in received:
            x = torch.maximum(x, r)
        return self.mix(x)


class DetectionHead(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = _conv(channels, channels, 3)
        self.out = nn.Conv2d(channels, 3, 1)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(F.relu(self.body(x)))  # channel 0 = heatmap logit, 1:3 = offsets


class AgentModel(nn.Module):
    """Encoder + fusion + head for one agent type.  Frozen after Step 0."""

    def __init__(self, spec: AgentSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.fusion = MaxFusion(spec.native_channels)
        self.head = DetectionHead(spec.native_channels)

    def encode(self, obs: torch.Tensor) -> torch.Tensor:
        n = self.spec.input_size
        if obs.shape[-2:] != (n, n):
            raise ValueError(f"{self.spec.agent_id} expects {n}x{n} observations, got {tuple(obs.shape[-2:])}")
        if obs.dim() == 2:
            obs = obs[None, None]
        elif obs.dim() == 3:
            obs = obs[:, None]
        return self.encoder(obs)


def encode(observation, agent: AgentModel) -> FeatureMap:
    obs = torch.as_tensor(np.asarray(observation), dtype=torch.float32)
    return FeatureMap(agent.encode(obs))


def fuse(local: FeatureMap, received: Sequence[FeatureMap], agent: AgentModel) -> FeatureMap:
    for r in received:
        if r.frame is not None and local.frame is not None and r.frame != local.frame:
            raise ValueError("received feature is not expressed in the local frame")
    return FeatureMap(agent.fusion(local.data, [r.data for r in received]), local.frame)


# -- geometry ------------------------------------------------------------------

def relative_affine(src: Sequence[Pose], dst: Sequence[Pose], extent: float) -> torch.Tensor:
    """Affine (B, 2, 3) sampling matrices mapping dst-frame normalized coords into src frame."""
    rows = []
    for s, d in zip(src, dst):
        a = d.yaw - s.yaw
        cs, sn = math.cos(-s.yaw), math.sin(-s.yaw)
        tx, ty = d.x - s.x, d.y - s.y
        bx = (cs * tx - sn * ty) / extent
        by = (sn * tx + cs * ty) / extent
        rows.append([[math.cos(a), -math.sin(a), bx], [math.sin(a), math.cos(a), by]])
    return torch.tensor(rows, dtype=torch.float32)


def warp_features(feat: torch.Tensor, src: Sequence[Pose], dst: Sequence[Pose], extent: float) -> torch.Tensor:
    """Nearest-neighbour warp of (B, C, H, W) features from ``src`` frames into ``dst`` frames."""
    theta = relative_affine(src, dst, extent)
    grid = F.affine_grid(theta, list(feat.shape), align_corners=False)
    return F.grid_sample(feat, grid, mode="nearest", padding_mode="zeros", align_corners=False)


# -- detection ---------------------------------------------------------------

def extract_peaks(heatmap: torch.Tensor, offsets: torch.Tensor, extent: float,
                  threshold: float = 0.1) -> list[tuple[float, float, float]]:
    """Local maxima (3x3) above ``threshold``, returned as (x, y, score) sorted by score."""
    h = heatmap[None, None]
    is_max = F.max_pool2d(h, 3, stride=1, padding=1) == h
    keep = (is_max & (h > threshold))[0, 0]
    rows, cols = torch.nonzero(keep, as_tuple=True)
    n = heatmap.shape[-1]
    cell = 2.0 * extent / n
    out = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        x = -extent + (c + 0.5 + float(offsets[0, r, c])) * cell
        y = -extent + (r + 0.5 + float(offsets[1, r, c])) * cell
        out.append((x, y, float(heatmap[r, c])))
    out.sort(key=lambda p: -p[2])
    return out


def detect(fused: FeatureMap | torch.Tensor, agent: AgentModel | None = None, extent: float = 32.0,
           threshold: float = 0.1, logits: torch.Tensor | None = None) -> Detections:
    """Run the head (unless raw ``logits`` are supplied) and extract peaks for one sample."""
    if logits is None:
        data = fused.data if isinstance(fused, FeatureMap) else fused
        if data.dim() == 3:
            data = data[None]
        logits = agent.head(data)[0]
    heat = torch.sigmoid(logits[0])
    offs = logits[1:3]
    return Detections(heatmap=heat, offsets=offs, peaks=extract_peaks(heat, offs, extent, threshold))


def center_targets(centers: Sequence[np.ndarray], size: int, extent: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Binary center heatmap (B, H, W) and offset targets (B, 2, H, W) for ego-frame centers."""
    heat = np.zeros((len(centers), size, size), dtype=np.float32)
    offs = np.zeros((len(centers), 2, size, size), dtype=np.float32)
    cell = 2.0 * extent / size
    for b, c in enumerate(centers):
        if len(c) == 0:
            continue
        u = (c[:, 0] + extent) / cell
        v = (c[:, 1] + extent) / cell
        col = np.clip(np.floor(u).astype(int), 0, size - 1)
        row = np.clip(np.floor(v).astype(int), 0, size - 1)
        heat[b, row, col] = 1.0
        offs[b, 0, row, col] = u - col - 0.5
        offs[b, 1, row, col] = v - row - 0.5
    return torch.from_numpy(heat), torch.from_numpy(offs)


# -- batching ------------------------------------------------------------------

def stack_observations(samples: Sequence[Sample], modality: str) -> torch.Tensor:
    """(B, n_agents, H, W) observation tensor for one modality."""
    return torch.from_numpy(np.stack([s.observations[modality] for s in samples]))


def collab_forward(models: Sequence[AgentModel], obs: Sequence[torch.Tensor], poses: Sequence[Sequence[Pose]],
                   extent: float, ego: int, share: Callable | None = None,
                   collab_poses: Sequence[Sequence[Pose]] | None = None) -> torch.Tensor:
    """Head logits for agent ``ego`` fusing every other agent's (possibly translated) feature.

    ``models[a]`` / ``obs[a]`` belong to agent slot ``a``; ``share(src, dst, feat)`` maps a
    collaborator feature into the ego's feature space before warping (identity when None).
    ``collab_poses`` optionally replaces the collaborators' believed poses (pose noise).
    """
    feats = [models[a].encode(obs[a]) for a in range(len(models))]
    received = []
    for a in range(len(models)):
        if a == ego:
            continue
        f = feats[a] if share is None else share(a, ego, feats[a])
        src = [p[a] for p in (collab_poses if collab_poses is not None else poses)]
        dst = [p[ego] for p in poses]
        received.append(warp_features(f, src, dst, extent))
    fused = models[ego].fusion(feats[ego], received)
    return models[ego].head(fused)


def train_homogeneous(spec: AgentSpec, dataset: Sequence[Sample], steps: int = 2000, seed: int = 0,
                      lr: float = 1e-3, batch_size: int = 8, extent: float = 32.0,
                      loss_fn: Callable | None = None, log_every: int = 50,
                      on_log: Callable[[dict], None] | None = None) -> tuple[AgentModel, list[dict]]:
    """Step 0: train encoder, fusion and head with homogeneous collaboration.

    Every sample contributes each of its viewpoints as ego, fusing the other
    viewpoints' features (same agent type).  Returns the model and the per-step log.
    """
    from .losses import detection_loss

    loss_fn = loss_fn or detection_loss
    torch.manual_seed(seed)
    model = AgentModel(spec)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n_agents = len(dataset[0].poses)
    size = spec.native_size[0]
    records = []
    for step in range(steps):
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        batch = [dataset[i] for i in idx]
        obs = stack_observations(batch, spec.modality.name)
        poses = [s.poses for s in batch]
        total = 0.0
        for ego in range(n_agents):
            logits = collab_forward([model] * n_agents, [obs[:, a] for a in range(n_agents)], poses, extent, ego)
            heat, offs = center_targets([s.centers[ego] for s in batch], size, extent)
            total = total + loss_fn(logits, heat, offs)
        loss = total / n_agents
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{spec.agent_id}: loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"stage": "step0", "agent": spec.agent_id, "step": step, "loss": loss.item()}
        records.append(rec)
        if on_log is not None:
            on_log(rec)
        if log_every and step % log_every == 0:
            log.info("step0 %s step %d loss %.5f", spec.agent_id, step, loss.item())
    return model, records
