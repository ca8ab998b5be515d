"""Alignment, consistency and task losses.

Conventions shared by every loss here:

* ``||a - b||^2`` is the *mean* of squared entries, so weights do not depend on
  the grid resolution.
* ``Std`` is the per-sample, per-channel standard deviation over spatial
  positions (population form, with ``1e-8`` added to the variance so the
  gradient stays finite on constant maps).
* A keypoint whose channel vector is zero has cosine similarity 0 with every
  other keypoint; the relation-matrix diagonal is 1 by construction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

STD_EPS = 1e-8
COS_EPS = 1e-8


@dataclass
class LossWeights:
    alpha: float = 1.0  # std term, distribution alignment
    beta: float = 1.0  # std term, cycle consistency
    lambda_d: float = 1.0
    lambda_s: float = 0.5
    lambda_p: float = 0.5
    lambda_a: float = 1.0
    lambda_c: float = 1.0
    lambda_u: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    teacher_stop_grad: bool = True  # the uni losses distil P into the senders without moving P

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def spatial_std(x: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (..., C)"""
    return torch.sqrt(x.flatten(-2).var(dim=-1, unbiased=False) + STD_EPS)


def _mean_std_loss(a: torch.Tensor, b: torch.Tensor, w: float) -> torch.Tensor:
    _check_same(a, b)
    loss = (a - b).pow(2).mean()
    if w:
        loss = loss + w * (spatial_std(a) - spatial_std(b)).pow(2).mean()
    return loss


def cycle_loss(feat: torch.Tensor, restored: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    return _mean_std_loss(feat, restored, beta)


def distribution_align_loss(p_m: torch.Tensor, p: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    return _mean_std_loss(p_m, p, alpha)


def keypoint_grid(height: int, width: int) -> torch.Tensor:
    """Nine (x, y) cell indices on a 3x3 lattice at 1/4, 1/2, 3/4 of the footprint."""
    fr = (0.25, 0.5, 0.75)
    pts = [(min(int(fx * width), width - 1), min(int(fy * height), height - 1)) for fy in fr for fx in fr]
    return torch.tensor(pts, dtype=torch.long)


def relation_matrix(sample: torch.Tensor, keypoints: torch.Tensor) -> torch.Tensor:
    """Cosine similarities between channel vectors at the keypoints.

    ``sample`` is (C, H, W) or (S, C, H, W); the result is (9, 9) or (S, 9, 9).
    """
    squeeze = sample.dim() == 3
    x = sample[None] if squeeze else sample
    h, w = x.shape[-2:]
    xs, ys = keypoints[:, 0], keypoints[:, 1]
    if (xs < 0).any() or (xs >= w).any() or (ys < 0).any() or (ys >= h).any():
        raise ValueError("keypoint outside the sample's spatial extent")
    vecs = x[:, :, ys, xs].transpose(1, 2)  # (S, K, C)
    unit = vecs / vecs.norm(dim=-1, keepdim=True).clamp_min(COS_EPS)
    m = (unit @ unit.transpose(1, 2)).clamp(-1.0, 1.0)
    eye = torch.eye(m.shape[-1], dtype=m.dtype)
    m = m * (1 - eye) + eye
    return m[0] if squeeze else m


def structural_align_loss(p_m: torch.Tensor, p: torch.Tensor, keypoints: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over samples of the mean absolute relation-matrix difference (/81)."""
    _check_same(p_m, p)
    if p_m.dim() == 3:
        p_m, p = p_m[None], p[None]
    if keypoints is None:
        keypoints = keypoint_grid(*p.shape[-2:])
    k = keypoints.shape[0]
    diff = (relation_matrix(p_m, keypoints) - relation_matrix(p, keypoints)).abs()
    return diff.sum(dim=(1, 2)).div(k * k).sum()


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25,
               reduction: str = "mean") -> torch.Tensor:
    """Binary sigmoid focal loss; ``alpha`` weights positives, ``1 - alpha`` negatives."""
    _check_same(logits, target)
    target = target.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    a_t = alpha * target + (1 - alpha) * (1 - target)
    loss = a_t * (1 - p_t).pow(gamma) * ce
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


class OccupancyHead(nn.Module):
    """Shared 2-layer occupancy predictor applied to every common feature."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 1)

    def forward(self, x):
        return self.conv2(F.relu(self.conv1(x)))[:, 0]


def pragmatic_align_loss(p_any: torch.Tensor, occupancy: torch.Tensor, occ_head: OccupancyHead,
                         gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    if p_any.dim() == 3:
        p_any = p_any[None]
    if occupancy.dim() == 2:
        occupancy = occupancy[None]
    if occ_head.conv1.in_channels != p_any.shape[1]:
        raise ValueError("occupancy head channels do not match the common feature")
    return focal_loss(occ_head(p_any), occupancy, gamma, alpha)


def multidim_align_loss(p_m, p, occupancy, occ_head, weights: LossWeights, keypoints=None,
                        use_stru: bool = True, use_pragma: bool = True, return_parts: bool = False):
    dis = distribution_align_loss(p_m, p, weights.alpha)
    zero = dis.new_zeros(())
    stru = structural_align_loss(p_m, p, keypoints) if use_stru and weights.lambda_s else zero
    prag = (pragmatic_align_loss(p_m, occupancy, occ_head, weights.focal_gamma, weights.focal_alpha)
            if use_pragma and weights.lambda_p else zero)
    total = weights.lambda_d * dis + weights.lambda_s * stru + weights.lambda_p * prag
    if return_parts:
        return total, {"uni_dis": dis, "uni_stru": stru, "uni_pragma": prag}
    return total


def stage1_loss(terms, p, occupancy, occ_head, weights: LossWeights, return_parts: bool = False):
    """``terms`` holds one {"cycle": ..., "uni": ...} dict per modality."""
    if weights.lambda_a:
        prag_p = pragmatic_align_loss(p, occupancy, occ_head, weights.focal_gamma, weights.focal_alpha)
    else:
        prag_p = p.new_zeros(())
    total = weights.lambda_a * prag_p
    for t in terms:
        total = total + weights.lambda_c * t["cycle"] + weights.lambda_u * t["uni"]
    if return_parts:
        return total, {"pragma_p": prag_p}
    return total


def detection_loss(logits: torch.Tensor, heat_target: torch.Tensor, offset_target: torch.Tensor,
                   gamma: float = 2.0, alpha: float = 0.25, offset_weight: float = 1.0) -> torch.Tensor:
    """Center focal loss (summed, divided by the positive count) + L1 offsets at positive cells.

    ``logits`` is (B, 3, H, W): heatmap logit then two offset channels.
    """
    if logits.dim() == 3:
        logits = logits[None]
        heat_target, offset_target = heat_target[None], offset_target[None]
    _check_same(logits[:, 0], heat_target)
    _check_same(logits[:, 1:3], offset_target)
    pos = heat_target > 0.5
    n_pos = int(pos.sum())
    heat = focal_loss(logits[:, 0], heat_target, gamma, alpha, reduction="sum") / max(n_pos, 1)
    if n_pos == 0:
        return heat
    mask = pos[:, None].expand_as(offset_target)
    off = (logits[:, 1:3] - offset_target).abs()[mask].sum() / (2 * n_pos)
    return heat + offset_weight * off
