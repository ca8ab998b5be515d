"""The alignment losses on hand-made tensors, to build intuition for what each one measures.

Run: python3 demos/02_losses.py
"""
import torch

from negorep.losses import (OccupancyHead, cycle_loss, distribution_align_loss, keypoint_grid, relation_matrix,
                            structural_align_loss)

torch.manual_seed(0)
p = torch.randn(1, 8, 16, 16)
kps = keypoint_grid(16, 16)

print("distribution loss compares values and per-channel spread:")
for scale in (1.0, 1.5, 3.0):
    print(f"  P vs {scale} * P -> {distribution_align_loss(scale * p, p).item():.4f}")

print("structural loss compares cosine relations between 9 keypoints, so rescaling is invisible to it:")
for scale in (1.0, 1.5, 3.0):
    print(f"  P vs {scale} * P -> {structural_align_loss(scale * p, p, kps).item():.6f}")
shifted = torch.roll(p, shifts=3, dims=-1)
print(f"  P vs P shifted by 3 cells -> {structural_align_loss(shifted, p, kps).item():.4f}")
print(f"  relation matrix diagonal: {torch.diagonal(relation_matrix(p[0], kps)).tolist()}")

print("cycle loss checks that the receiver restores the local feature:")
f = torch.randn(1, 8, 16, 16)
print(f"  perfect restore -> {cycle_loss(f, f.clone()).item():.4f}")
print(f"  restore with noise 0.1 -> {cycle_loss(f, f + 0.1 * torch.randn_like(f)).item():.4f}")
print(f"  restore that loses contrast (0.5 * F) -> {cycle_loss(f, 0.5 * f).item():.4f}")

head = OccupancyHead(8)
print(f"occupancy head maps a common feature to one logit map: {tuple(head(p).shape)}")
