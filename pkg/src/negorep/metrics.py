"""Toy detection AP and Gaussian KL domain gap."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch

LOOSE_RADIUS = 2.0
STRICT_RADIUS = 1.0
STD_FLOOR = 1e-6


def match_peaks(peaks: Sequence[tuple[float, float, float]], gt_centers: np.ndarray, radius: float) -> list[bool]:
    """Greedy matching in descending-score order; each peak takes the nearest free GT in range."""
    gt = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 2)
    free = np.ones(len(gt), dtype=bool)
    order = sorted(range(len(peaks)), key=lambda i: -peaks[i][2])
    hits = [False] * len(peaks)
    for i in order:
        if not free.any():
            break
        x, y, _ = peaks[i]
        d = np.hypot(gt[:, 0] - x, gt[:, 1] - y)
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            free[j] = False
            hits[i] = True
    return hits


def _ap_from_scored(scores: np.ndarray, hits: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(hits[order])
    fp = np.cumsum(~hits[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # all-point interpolation: precision envelope integrated over recall
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def detection_ap(peaks, gt_centers, radius: float = LOOSE_RADIUS) -> float:
    """AP of one sample's peaks against its ground-truth centers.

    Empty GT scores 1.0 when there are no peaks and 0.0 otherwise.
    """
    if hasattr(peaks, "peaks"):
        peaks = peaks.peaks
    return pooled_ap([(peaks, gt_centers)], radius)


def pooled_ap(items: Iterable[tuple[Sequence, np.ndarray]], radius: float = LOOSE_RADIUS) -> float:
    """AP with peaks from many samples ranked together (matching stays per sample)."""
    scores, hits, n_gt = [], [], 0
    for peaks, gt in items:
        if hasattr(peaks, "peaks"):
            peaks = peaks.peaks
        hits += match_peaks(peaks, gt, radius)
        scores += [p[2] for p in peaks]
        n_gt += len(np.asarray(gt).reshape(-1, 2))
    return _ap_from_scored(np.asarray(scores, dtype=np.float64), np.asarray(hits, dtype=bool), n_gt)


def gaussian_stats(features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and std over batch and space for (B, C, H, W) features."""
    x = torch.as_tensor(features, dtype=torch.float64)
    if x.dim() == 3:
        x = x[None]
    flat = x.transpose(0, 1).reshape(x.shape[1], -1)
    return flat.mean(dim=1), flat.std(dim=1, unbiased=False).clamp_min(STD_FLOOR)


def kl_domain_gap(features_a, features_b) -> float:
    """Mean over channels of KL(N_a || N_b) between per-channel Gaussian fits."""
    a, b = torch.as_tensor(features_a), torch.as_tensor(features_b)
    if a.shape[-3:] != b.shape[-3:]:
        raise ValueError(f"feature shapes differ: {tuple(a.shape[-3:])} vs {tuple(b.shape[-3:])}")
    mu_a, sd_a = gaussian_stats(a)
    mu_b, sd_b = gaussian_stats(b)
    kl = torch.log(sd_b / sd_a) + (sd_a ** 2 + (mu_a - mu_b) ** 2) / (2 * sd_b ** 2) - 0.5
    return float(kl.clamp_min(0.0).mean())
