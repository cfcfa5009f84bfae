"""Training objective: class-weighted cross-entropy, masked concept losses
at both levels, and the interaction term, combined with configurable
weights. Masked concepts contribute neither loss nor gradient; a fully
masked batch yields an exactly zero concept loss through the epsilon
denominator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import EXPERT_IDS, PROB_FLOOR
from .synthcohort import (L1_CATEGORY_COUNTS, L1_TARGET_DIM, NUM_L1, NUM_L2,
                          L1_OFFSETS)

EPSILON = 1e-8


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.3
    lambda_int: float = 0.1
    class_weights: np.ndarray | None = None  # (C,), > 0; None = unweighted
    epsilon: float = EPSILON

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda_int"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.class_weights is not None:
            cw = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(cw <= 0):
                raise ValueError("class weights must be > 0")
            self.class_weights = cw


def inverse_frequency_weights(labels, num_classes: int) -> np.ndarray:
    """Inverse empirical class frequency, normalized to mean 1."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = 1.0 / np.maximum(counts, 1.0)
    return w / w.mean()


def class_weighted_ce(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Weighted cross-entropy, normalized by the summed sample weights."""
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("label out of range")
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.select_index(logp, labels)              # (N,)
    if class_weights is None:
        return ad.mul(ad.mean_(picked), -1.0)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    weighted = ad.mul(picked, Tensor(w))
    return ad.div(ad.mul(ad.sum_(weighted), -1.0), float(w.sum()))


def _bce(p: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy with probabilities floored at 1e-12."""
    t = Tensor(targets)
    p_c = ad.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return ad.mul(ad.add(ad.mul(t, ad.log(p_c)),
                         ad.mul(ad.sub(1.0, t), ad.log(ad.sub(1.0, p_c)))), -1.0)


def masked_concept_loss(per_expert_probs: dict[str, Tensor], targets: np.ndarray,
                        masks: np.ndarray, level: int,
                        epsilon: float = EPSILON,
                        pos_weights: np.ndarray | None = None) -> Tensor:
    """Masked concept supervision, averaged over experts.

    Level 1 expects (N, 19) per-category probabilities with per-concept
    masks (N, 5); each concept's BCE is normalized by its category count.
    Level 2 expects (N, 5) probabilities and masks. `pos_weights`
    optionally rebalances positive/negative BCE terms per target entry
    (the hard-bottleneck recipe); entries are (w_pos, w_neg) pairs.
    """
    targets = np.asarray(targets, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if level == 1:
        t_dim, k = L1_TARGET_DIM, NUM_L1
    elif level == 2:
        t_dim, k = NUM_L2, NUM_L2
    else:
        raise ValueError("level must be 1 or 2")
    if targets.shape[1] != t_dim or masks.shape[1] != k:
        raise ValueError(f"level-{level} targets/masks must be (N,{t_dim})/(N,{k})")

    mask_total = float(masks.sum())
    per_expert = []
    for eid in EXPERT_IDS:
        probs = per_expert_probs[eid]
        if probs.shape[1] != t_dim:
            raise ValueError(f"expert {eid} probabilities must be (N, {t_dim})")
        bce = _bce(probs, targets)
        if pos_weights is not None:
            w = np.where(targets > 0.5, pos_weights[0], pos_weights[1])
            bce = ad.mul(bce, Tensor(w))
        if level == 1:
            # weight each category by its concept's mask / category count
            expand = np.zeros((k, t_dim))
            for kk, (off, v) in enumerate(zip(L1_OFFSETS, L1_CATEGORY_COUNTS)):
                expand[kk, off:off + v] = 1.0 / v
            weights = masks @ expand                    # (N, 19)
        else:
            weights = masks
        num = ad.sum_(ad.mul(bce, Tensor(weights)))
        per_expert.append(ad.div(num, mask_total + epsilon))
    total = per_expert[0]
    for term in per_expert[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(per_expert))


@dataclass
class LossBreakdown:
    total: Tensor
    cls: Tensor
    concept_l1: Tensor | None
    concept_l2: Tensor | None
    interaction: Tensor | None

    def values(self) -> dict[str, float]:
        out = {"total": float(self.total.data), "cls": float(self.cls.data)}
        out["concept_l1"] = float(self.concept_l1.data) if self.concept_l1 is not None else 0.0
        out["concept_l2"] = float(self.concept_l2.data) if self.concept_l2 is not None else 0.0
        out["interaction"] = float(self.interaction.data) if self.interaction is not None else 0.0
        return out


def total_loss(cls_loss: Tensor, weights: LossWeights,
               concept_l1: Tensor | None = None,
               concept_l2: Tensor | None = None,
               interaction: Tensor | None = None) -> LossBreakdown:
    """Weighted sum of the component losses, with the breakdown retained."""
    total = cls_loss
    if concept_l1 is not None:
        total = ad.add(total, ad.mul(concept_l1, weights.lambda1))
    if concept_l2 is not None:
        total = ad.add(total, ad.mul(concept_l2, weights.lambda2))
    if interaction is not None:
        total = ad.add(total, ad.mul(interaction, weights.lambda_int))
    return LossBreakdown(total=total, cls=cls_loss, concept_l1=concept_l1,
                         concept_l2=concept_l2, interaction=interaction)
