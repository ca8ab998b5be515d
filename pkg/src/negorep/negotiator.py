"""Feature-pyramid negotiator producing the common representation during training."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bridge import StandardRepSpec


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 2
    estimator_hidden: int = 32
    standardize_inputs: bool = True  # resizers feeding the negotiator standardize each channel

    def validate(self, spec: StandardRepSpec):
        if self.levels < 1:
            raise ValueError("pyramid needs at least one level")
        smallest = min(spec.height, spec.width) // 2 ** self.levels
        if smallest < 4 or spec.height % 2 ** self.levels or spec.width % 2 ** self.levels:
            raise ValueError(f"{self.levels} levels do not fit a {spec.height}x{spec.width} standard grid")


class PyramidLayer(nn.Module):
    """2x average pooling plus a residual 3x3 conv."""

    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        x = F.avg_pool2d(x, 2)
        return x + self.conv(x)


class Estimator(nn.Module):
    def __init__(self, c: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, c, 1)

    def forward(self, x):
        return torch.sigmoid(self.conv2(F.relu(self.conv1(x))))


class ShrinkHeader(nn.Module):
    """(L+1)*C -> C: a linear 1x1 path (initialised to the level average) plus a zero-initialised MLP."""

    def __init__(self, c: int, n_levels: int):
        super().__init__()
        self.linear = nn.Conv2d(c * n_levels, c, 1)
        self.mlp = nn.Sequential(nn.Conv2d(c * n_levels, c, 1), nn.GELU(), nn.Conv2d(c, c, 1))
        self.set_average(c, n_levels)

    @torch.no_grad()
    def set_average(self, c: int, n_levels: int):
        w = torch.cat([torch.eye(c)] * n_levels, dim=1) / n_levels
        self.linear.weight.copy_(w[:, :, None, None])
        self.linear.bias.zero_()
        self.mlp[-1].weight.zero_()
        self.mlp[-1].bias.zero_()

    def forward(self, x):
        return self.linear(x) + self.mlp(x)


class Negotiator(nn.Module):
    def __init__(self, spec: StandardRepSpec, config: PyramidConfig = PyramidConfig()):
        super().__init__()
        config.validate(spec)
        self.spec = spec
        self.config = config
        c = spec.channels
        self.layers = nn.ModuleList([PyramidLayer(c) for _ in range(config.levels)])
        # one estimator per level, level 0 included, shared across modalities
        self.estimators = nn.ModuleList([Estimator(c, config.estimator_hidden) for _ in range(config.levels + 1)])
        self.shrink = ShrinkHeader(c, config.levels + 1)

    def pyramid(self, u: torch.Tensor) -> list[torch.Tensor]:
        levels = [u]
        for layer in self.layers:
            levels.append(layer(levels[-1]))
        return levels

    def forward(self, u_by_modality: Mapping[str, torch.Tensor], fixed_importance: float | None = None,
                return_details: bool = False):
        if not u_by_modality:
            raise ValueError("negotiation needs at least one modality")
        for name, u in u_by_modality.items():
            if tuple(u.shape[-3:]) != self.spec.shape:
                raise ValueError(f"{name}: {tuple(u.shape[-3:])} is not the standard shape {self.spec.shape}")
        names = sorted(u_by_modality)  # order-independent by construction
        pyramids = {m: self.pyramid(u_by_modality[m]) for m in names}
        importance = {m: [] for m in names}
        per_level = []
        for lvl in range(self.config.levels + 1):
            acc = 0
            for m in names:
                u_l = pyramids[m][lvl]
                c_l = (torch.full_like(u_l, fixed_importance) if fixed_importance is not None
                       else self.estimators[lvl](u_l))
                importance[m].append(c_l)
                acc = acc + u_l * c_l
            per_level.append(acc / len(names))
        size = (self.spec.height, self.spec.width)
        up = [p if tuple(p.shape[-2:]) == size else F.interpolate(p, size=size, mode="bilinear", align_corners=False)
              for p in per_level]
        p = self.shrink(torch.cat(up, dim=1))
        if return_details:
            return p, {"levels": pyramids, "importance": importance, "per_level": per_level}
        return p


def pyramid_levels(u: torch.Tensor, negotiator: Negotiator) -> list[torch.Tensor]:
    return negotiator.pyramid(u)


def estimate_importance(u_l: torch.Tensor, level: int, negotiator: Negotiator) -> torch.Tensor:
    c = negotiator.spec.channels
    if u_l.shape[-3] != c or u_l.shape[-1] != negotiator.spec.width // 2 ** level:
        raise ValueError(f"feature does not match pyramid level {level}")
    return negotiator.estimators[level](u_l)


def negotiate(u_by_modality: Mapping[str, torch.Tensor], negotiator: Negotiator) -> torch.Tensor:
    return negotiator(u_by_modality)
