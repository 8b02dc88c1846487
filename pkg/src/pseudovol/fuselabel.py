"""Pseudo-label generation, label fusion, weight maps and the weighted BCE loss.

Ground-truth voxels carry weight 1, pseudo-labeled voxels carry weight alpha.
With alpha = 0 the loss degenerates to plain BCE over the labeled voxels only,
i.e. the sparse-training baseline that simply masks out unlabeled voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import UNLABELED, LabelVolume, ProbVolume

PROV_GT = 0
PROV_PSEUDO = 1

EPS = 1e-7


@dataclass(frozen=True)
class Alpha:
    value: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.value}")


@dataclass(frozen=True)
class PseudoLabels:
    """Targets defined exactly on the unlabeled voxel set."""

    values: np.ndarray  # full grid, meaningful only where mask is True
    mask: np.ndarray    # True on unlabeled voxels

    @property
    def shape(self):
        return self.mask.shape


@dataclass(frozen=True)
class FusedTargets:
    """Dense training targets with per-voxel loss weights and provenance."""

    targets: np.ndarray     # float32 in [0, 1]
    weights: np.ndarray     # float32, 1 on GT, alpha on pseudo
    provenance: np.ndarray  # uint8, PROV_GT / PROV_PSEUDO
    alpha: float

    @property
    def shape(self):
        return self.targets.shape


def make_pseudo_labels(probs: ProbVolume, labels: LabelVolume,
                       mode: str = "hard", thr: float = 0.5) -> PseudoLabels:
    """Turn 2D-model probabilities into targets for the unlabeled voxels.

    Hard mode thresholds at `thr` (ties map to foreground); soft mode keeps the
    probabilities as-is. Labeled voxels are untouched by this op.
    """
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs labels {labels.shape}")
    if mode not in ("hard", "soft"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "hard" and not (0.0 < thr < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {thr}")
    mask = labels.labels == UNLABELED
    if mode == "hard":
        values = (probs.probs >= thr).astype(np.float32)
    else:
        values = probs.probs.astype(np.float32)
    return PseudoLabels(values=values, mask=mask)


def fuse(labels: LabelVolume, pseudo: PseudoLabels, alpha: Alpha | float) -> FusedTargets:
    """Combine ground truth with pseudo-labels into dense weighted targets."""
    if isinstance(alpha, (int, float)):
        alpha = Alpha(float(alpha))
    if pseudo.shape != labels.shape:
        raise ValueError(f"shape mismatch: pseudo {pseudo.shape} vs labels {labels.shape}")
    unlabeled = labels.labels == UNLABELED
    if (pseudo.mask & ~unlabeled).any():
        raise ValueError("pseudo-labels overlap the ground-truth voxel set")
    if (unlabeled & ~pseudo.mask).any():
        raise ValueError("pseudo-labels missing on part of the unlabeled voxel set")
    targets = np.where(unlabeled, pseudo.values, labels.labels).astype(np.float32)
    weights = np.where(unlabeled, np.float32(alpha.value), np.float32(1.0))
    provenance = np.where(unlabeled, np.uint8(PROV_PSEUDO), np.uint8(PROV_GT))
    return FusedTargets(targets=targets, weights=weights,
                        provenance=provenance, alpha=alpha.value)


def _bce_terms(pred, targets):
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1.0 - EPS)
    t = np.asarray(targets, dtype=np.float64)
    if np.isnan(p).any() or np.isnan(t).any():
        raise ValueError("NaN in loss inputs")
    return p, t, -(t * np.log(p) + (1.0 - t) * np.log1p(-p))


def weighted_bce(pred, fused: FusedTargets) -> float:
    """Weighted-mean binary cross-entropy: sum(w*l) / sum(w).

    Equals (S + alpha*P) / (N_L + alpha*N_U) where S and P are the unweighted
    BCE sums over ground-truth and pseudo voxels.
    """
    pred = pred.probs if isinstance(pred, ProbVolume) else pred
    if np.shape(pred) != fused.shape:
        raise ValueError(f"shape mismatch: pred {np.shape(pred)} vs targets {fused.shape}")
    _, _, losses = _bce_terms(pred, fused.targets)
    w = fused.weights.astype(np.float64)
    wsum = w.sum()
    if wsum == 0:
        return 0.0
    return float((w * losses).sum() / wsum)


def weighted_bce_grad(pred, fused: FusedTargets) -> np.ndarray:
    """Per-voxel d(loss)/d(p): w * (p - t) / (p (1 - p)) / sum(w).

    Gradient of the clamped loss; zero outside the clamp interval by
    convention matching the forward clamp.
    """
    pred = pred.probs if isinstance(pred, ProbVolume) else pred
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != fused.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs targets {fused.shape}")
    p, t, _ = _bce_terms(pred, fused.targets)
    w = fused.weights.astype(np.float64)
    wsum = w.sum()
    if wsum == 0:
        return np.zeros(fused.shape, dtype=np.float64)
    grad = w * (p - t) / (p * (1.0 - p)) / wsum
    grad[(pred < EPS) | (pred > 1.0 - EPS)] = 0.0
    return grad


def weighted_bce_torch(pred_t, target_t, weight_t):
    """Differentiable torch version used inside training loops."""
    import torch

    p = torch.clamp(pred_t, EPS, 1.0 - EPS)
    losses = -(target_t * torch.log(p) + (1.0 - target_t) * torch.log1p(-p))
    wsum = weight_t.sum()
    if wsum.item() == 0:
        return pred_t.sum() * 0.0
    return (weight_t * losses).sum() / wsum
