"""Training losses: per-point mask BCE, per-query Dice, per-query class CE.

Supervision is click-anchored: each query is bound to the instance of the
click that spawned it, so no bipartite matching is involved; a positive click
on one instance acts as implicit negative supervision for every other query's
mask at those points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import softmax_rows
from .sampling import ClickSet




@dataclass
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0
    ce: float = 1.0
    eps: float = 1e-6    # Dice stabilizer

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if min(self.bce, self.dice, self.ce) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SupervisionTargets:
    masks: np.ndarray      # (N, K) in {0,1}
    classes: np.ndarray    # (K,) int

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.masks.ndim != 2 or self.classes.shape[0] != self.masks.shape[1]:
            raise ValueError("targets misaligned: masks (N,K), classes (K,)")


def build_targets(
    clicks: ClickSet, instance_ids: np.ndarray, class_ids: np.ndarray
) -> SupervisionTargets:
    """Ground-truth mask/class per query from the clicks' source instances."""
    if clicks.source_instance is None:
        raise ValueError("clicks lack source_instance tags (training-only data)")
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    masks = (instance_ids[:, None] == clicks.source_instance[None, :]).astype(np.float64)
    classes = np.asarray(class_ids, dtype=np.int64)[clicks.source_instance]
    return SupervisionTargets(masks=masks, classes=classes)


# ---------------------------------------------------------------------------

def bce_loss(mask_logits: np.ndarray, targets: SupervisionTargets) -> float:
    """Mean binary cross-entropy over all N*K entries.

    Evaluated in the logits domain (max(x,0) - x*m + log1p(exp(-|x|))), which
    equals clamping the probability away from {0,1} but keeps a live gradient
    on saturated logits; an early all-background collapse stays recoverable.
    """
    x = np.asarray(mask_logits, dtype=np.float64)
    m = targets.masks
    val = np.maximum(x, 0.0) - x * m + np.log1p(np.exp(-np.abs(x)))
    return float(np.mean(val))


def bce_grad(mask_logits: np.ndarray, targets: SupervisionTargets) -> np.ndarray:
    g = expit(mask_logits) - targets.masks
    return g / mask_logits.size


def dice_loss(mask_logits: np.ndarray, targets: SupervisionTargets, eps: float = 1e-6) -> float:
    """Mean over queries of 1 - (2*sum(p*m)+eps)/(sum(p)+sum(m)+eps)."""
    m = targets.masks
    p = expit(mask_logits)
    num = 2.0 * np.sum(p * m, axis=0) + eps
    den = np.sum(p, axis=0) + np.sum(m, axis=0) + eps
    return float(np.mean(1.0 - num / den))


def dice_grad(mask_logits: np.ndarray, targets: SupervisionTargets, eps: float = 1e-6) -> np.ndarray:
    m = targets.masks
    p = expit(mask_logits)
    k = mask_logits.shape[1]
    num = 2.0 * np.sum(p * m, axis=0) + eps      # (K,)
    den = np.sum(p, axis=0) + np.sum(m, axis=0) + eps
    # d/dp of -num/den, per entry
    dp = -(2.0 * m * den - num) / (den * den)
    return dp * p * (1.0 - p) / k


def ce_loss(class_logits: np.ndarray, targets: SupervisionTargets) -> float:
    """Mean over queries of -log softmax(column)[gt_class].

    Computed as shifted log-sum-exp rather than log(softmax) so saturated
    float32 logits stay finite.
    """
    n_c, k = class_logits.shape
    cls = targets.classes
    if np.any(cls < 0) or np.any(cls >= n_c):
        raise ValueError(f"gt_class out of range [0, {n_c})")
    z = class_logits.T.astype(np.float64)        # (K, N_c)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return float(np.mean(-log_probs[np.arange(k), cls]))


def ce_grad(class_logits: np.ndarray, targets: SupervisionTargets) -> np.ndarray:
    n_c, k = class_logits.shape
    probs = softmax_rows(class_logits.T)
    probs[np.arange(k), targets.classes] -= 1.0
    return probs.T / k


# ---------------------------------------------------------------------------

def total_loss(stage_outputs, targets: SupervisionTargets, weights: LossWeights):
    """Deep supervision: weighted loss at every stage, averaged over stages.

    Returns (scalar, breakdown) where breakdown lists per-stage dicts with
    the unweighted term values.
    """
    n_stages = len(stage_outputs)
    total = 0.0
    breakdown = []
    for out in stage_outputs:
        b = bce_loss(out.mask_logits, targets)
        d = dice_loss(out.mask_logits, targets, weights.eps)
        c = ce_loss(out.class_logits, targets)
        total += weights.bce * b + weights.dice * d + weights.ce * c
        breakdown.append({"bce": b, "dice": d, "ce": c})
    return total / n_stages, breakdown


def total_loss_grads(stage_outputs, targets: SupervisionTargets, weights: LossWeights):
    """Per-stage (d_mask_logits, d_class_logits) lists for decode_backward."""
    n_stages = len(stage_outputs)
    d_masks, d_classes = [], []
    for out in stage_outputs:
        dm = weights.bce * bce_grad(out.mask_logits, targets)
        dm += weights.dice * dice_grad(out.mask_logits, targets, weights.eps)
        d_masks.append(dm / n_stages)
        d_classes.append(weights.ce * ce_grad(out.class_logits, targets) / n_stages)
    return d_masks, d_classes
