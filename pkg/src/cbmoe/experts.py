"""Interaction-decomposed expert pathways and the signed perturbation loss.

Four experts consume the concatenated modality embeddings: one uniqueness
expert per modality (u1, u2), a redundancy expert (r) and a synergy expert
(s). Training enforces their semantics by injecting Gaussian noise into one
modality embedding at a time and penalizing (signed) KL divergence between
each expert's clean and perturbed class distributions: experts encouraged
to be sensitive to a modality carry sign -1 for it, invariant experts +1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import LEAKY_SLOPE

EXPERT_IDS = ("u1", "u2", "r", "s")
NUM_EXPERTS = len(EXPERT_IDS)
NUM_MODALITIES = 2

PROB_FLOOR = 1e-12


@dataclass
class ExpertMLP:
    W1: Tensor  # (hidden, 2d)
    b1: Tensor  # (hidden,)
    W2: Tensor  # (d, hidden)
    b2: Tensor  # (d,)


@dataclass
class ExpertSet:
    experts: dict[str, ExpertMLP]
    perturb_sigma_scale: float = 1.0

    def __post_init__(self):
        if tuple(self.experts.keys()) != EXPERT_IDS:
            raise ValueError(f"expert set must hold exactly {EXPERT_IDS}")


def sign_pattern() -> dict[tuple[str, int], int]:
    """Sign per (expert, modality): -1 encourages sensitivity, +1 invariance."""
    signs = {}
    for m in range(NUM_MODALITIES):
        signs[("u1", m)] = -1 if m == 0 else +1
        signs[("u2", m)] = -1 if m == 1 else +1
        signs[("r", m)] = +1
        signs[("s", m)] = -1
    return signs




def expert_forward(e1: Tensor, e2: Tensor, mlp: ExpertMLP, *,
                   dropout: float = 0.0,
                   rng: np.random.Generator | None = None) -> Tensor:
    """z_e = W2 LeakyReLU(W1 [e1; e2] + b1) + b2 for a batch (N, d) pair."""
    x = ad.concat([e1, e2], axis=1)
    h = ad.leaky_relu(ad.add(ad.matmul(x, ad.transpose(mlp.W1)), ad.reshape(mlp.b1, (1, -1))),
                      LEAKY_SLOPE)
    if dropout > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = ad.mul(h, Tensor(keep))
    return ad.add(ad.matmul(h, ad.transpose(mlp.W2)), ad.reshape(mlp.b2, (1, -1)))


def perturb_modality(e_m: Tensor, sigma_scale: float,
                     rng: np.random.Generator) -> Tensor:
    """Add N(0, sigma^2 I) noise, sigma = sigma_scale * std of the batch entries.

    A degenerate all-constant batch (std 0) falls back to sigma = sigma_scale.
    """
    if sigma_scale <= 0.0:
        raise ValueError("sigma_scale must be > 0")
    batch_std = float(np.std(e_m.data))
    sigma = sigma_scale * batch_std if batch_std > 0.0 else sigma_scale
    noise = sigma * rng.normal(size=e_m.shape)
    return ad.add(e_m, Tensor(noise))


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p || q) in nats with probabilities floored at 1e-12."""
    p_c = ad.clamp(p, PROB_FLOOR, None)
    q_c = ad.clamp(q, PROB_FLOOR, None)
    return ad.sum_(ad.mul(p_c, ad.sub(ad.log(p_c), ad.log(q_c))), axis=-1)


def _check_normalized(probs: Tensor, what: str):
    sums = probs.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"{what} rows must sum to 1 (max dev "
                         f"{np.max(np.abs(sums - 1.0)):.2e})")


def interaction_loss(clean_probs: dict[str, Tensor],
                     perturbed_probs: list[dict[str, Tensor]],
                     signs: dict[tuple[str, int], int] | None = None) -> Tensor:
    """Mean over experts of sum_m s_e^m KL(p_e^clean || p_e^m).

    clean_probs maps expert id -> (N, C) class distribution; perturbed_probs
    holds one such map per perturbed modality. KL terms are averaged over
    the batch before the signed sum.
    """
    if signs is None:
        signs = sign_pattern()
    if len(perturbed_probs) != NUM_MODALITIES:
        raise ValueError(f"expected {NUM_MODALITIES} perturbed prediction sets")
    for eid in EXPERT_IDS:
        _check_normalized(clean_probs[eid], f"clean predictions of {eid}")
        for m in range(NUM_MODALITIES):
            _check_normalized(perturbed_probs[m][eid],
                              f"modality-{m} perturbed predictions of {eid}")
    total = None
    for eid in EXPERT_IDS:
        for m in range(NUM_MODALITIES):
            term = ad.mul(ad.mean_(kl_divergence(clean_probs[eid],
                                                 perturbed_probs[m][eid])),
                          float(signs[(eid, m)]))
            total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / NUM_EXPERTS)


def per_expert_kl(clean_probs: dict[str, Tensor],
                  perturbed_probs: list[dict[str, Tensor]]) -> dict[str, list[float]]:
    """Unsigned mean KL per (expert, modality); diagnostic for semantics checks."""
    out: dict[str, list[float]] = {}
    for eid in EXPERT_IDS:
        out[eid] = [float(ad.mean_(kl_divergence(clean_probs[eid],
                                                 perturbed_probs[m][eid])).data)
                    for m in range(NUM_MODALITIES)]
    return out
