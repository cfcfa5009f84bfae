"""Per-expert concept formation, gating and prediction heads.

Each concept owns positive/negative state projections, a scalar scorer and
an optional residual projection of the expert latent. The concept
embedding passed downstream mixes the two states by the scorer's sigmoid
activation and, for soft bottlenecks, adds the residual, so task signal
can bypass the concept vocabulary. Morphology (level-1) concepts are
ordinal: each carries one supervised sigmoid per category on top of the
shared states, flattening to 19 supervised probabilities. Biomarker
(level-2) concepts are binary, so the mixing scorer is itself supervised.

In the hierarchical variant, level-2 blocks read the expert latent
concatenated with the level-1 concept embeddings. Scalar (CBM) variants
feed only probability vectors to the heads; embedding (CEM) variants feed
the concatenated concept embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import LEAKY_SLOPE
from .synthcohort import (L1_CATEGORY_COUNTS, L1_TARGET_DIM, NUM_L1, NUM_L2,
                          L1_OFFSETS)

HIERARCHIES = ("flat", "hier")
LEVELS = ("morph", "bio", "morph+bio")
RESIDUALS = ("soft", "hard")
BOTTLENECKS = ("cem", "cbm")

# maps each of the 19 level-1 categories to its owning concept
L1_CATEGORY_TO_CONCEPT = np.repeat(np.arange(NUM_L1), L1_CATEGORY_COUNTS)


class VariantError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariant:
    hierarchy: str = "hier"
    levels: str = "morph+bio"
    residual: str = "soft"
    bottleneck: str = "cem"

    def __post_init__(self):
        if self.hierarchy not in HIERARCHIES:
            raise VariantError(f"hierarchy must be one of {HIERARCHIES}")
        if self.levels not in LEVELS:
            raise VariantError(f"levels must be one of {LEVELS}")
        if self.residual not in RESIDUALS:
            raise VariantError(f"residual must be one of {RESIDUALS}")
        if self.bottleneck not in BOTTLENECKS:
            raise VariantError(f"bottleneck must be one of {BOTTLENECKS}")
        if self.hierarchy == "hier" and self.levels != "morph+bio":
            raise VariantError("hier requires both concept levels (morph+bio)")

    @property
    def has_l1(self) -> bool:
        return self.levels in ("morph", "morph+bio")

    @property
    def has_l2(self) -> bool:
        return self.levels in ("bio", "morph+bio")

    @property
    def gamma_res(self) -> float:
        # scalar bottlenecks keep no residual pathway; embeddings they do
        # compute are used only for hierarchy wiring
        if self.bottleneck == "cbm":
            return 0.0
        return 1.0 if self.residual == "soft" else 0.0

    @property
    def bottleneck_kind(self) -> str:
        if self.bottleneck == "cbm":
            return "cbm_scalar"
        return "cem_soft" if self.residual == "soft" else "cem_hard"

    def name(self) -> str:
        return f"{self.hierarchy}-{self.levels}-{self.residual}-{self.bottleneck}"


def parse_variant(text: str) -> ModelVariant:
    """Parse names like 'hier-morph+bio', 'flat-morph-hard', 'flat-bio-cbm'."""
    tokens = text.strip().lower().split("-")
    if len(tokens) < 2:
        raise VariantError(f"cannot parse variant {text!r}")
    hierarchy, levels = tokens[0], tokens[1]
    residual, bottleneck = "soft", "cem"
    for tok in tokens[2:]:
        if tok in RESIDUALS:
            residual = tok
        elif tok in BOTTLENECKS:
            bottleneck = tok
        else:
            raise VariantError(f"unknown variant modifier {tok!r} in {text!r}")
    return ModelVariant(hierarchy, levels, residual, bottleneck)


# single-concept operations ---------------------------------------------------

def concept_states(z: Tensor, phi_pos: tuple[Tensor, Tensor],
                   phi_neg: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """LeakyReLU of the positive/negative affine maps of the block input."""
    W_p, b_p = phi_pos
    W_n, b_n = phi_neg
    if W_p.shape[1] != z.shape[-1]:
        raise ValueError(f"block expects input dim {W_p.shape[1]}, got {z.shape[-1]}")
    c_pos = ad.leaky_relu(ad.add(ad.matmul(z, ad.transpose(W_p)), ad.reshape(b_p, (1, -1))),
                          LEAKY_SLOPE)
    c_neg = ad.leaky_relu(ad.add(ad.matmul(z, ad.transpose(W_n)), ad.reshape(b_n, (1, -1))),
                          LEAKY_SLOPE)
    return c_pos, c_neg


def concept_activation(c_pos: Tensor, c_neg: Tensor,
                       scorer: tuple[Tensor, Tensor]) -> Tensor:
    """sigmoid(scorer([c+; c-])), shape (N, 1)."""
    W, b = scorer
    pair = ad.concat([c_pos, c_neg], axis=1)
    return ad.sigmoid(ad.add(ad.matmul(pair, ad.transpose(W)), ad.reshape(b, (1, -1))))


def concept_embed(c_pos: Tensor, c_neg: Tensor, p: Tensor, z: Tensor,
                  residual: tuple[Tensor, Tensor] | None,
                  gamma_res: float) -> Tensor:
    """p*c+ + (1-p)*c- (+ residual projection of z when gamma_res = 1)."""
    mix = ad.add(ad.mul(p, c_pos), ad.mul(ad.sub(1.0, p), c_neg))
    if gamma_res and residual is not None:
        W, b = residual
        mix = ad.add(mix, ad.mul(ad.add(ad.matmul(z, ad.transpose(W)),
                                        ad.reshape(b, (1, -1))), gamma_res))
    return mix


def level2_input(z: Tensor, B1: Tensor) -> Tensor:
    """[z_e; B_1]: the conditioning input of hierarchical level-2 blocks."""
    if z.shape[0] != B1.shape[0]:
        raise ValueError("batch dims of z and B1 disagree")
    return ad.concat([z, B1], axis=1)


def gate(e1: Tensor, e2: Tensor, gate_W: Tensor, gate_b: Tensor) -> Tensor:
    """Dense softmax routing over the four experts from [e1; e2]."""
    x = ad.concat([e1, e2], axis=1)
    logits = ad.add(ad.matmul(x, ad.transpose(gate_W)), ad.reshape(gate_b, (1, -1)))
    return ad.softmax(logits, axis=-1)


def fuse_predict(alpha: Tensor, expert_logits: list[Tensor]) -> Tensor:
    """Gate-weighted sum of per-expert logits."""
    out = None
    for e, logits in enumerate(expert_logits):
        term = ad.mul(alpha[:, e:e + 1], logits)
        out = term if out is None else ad.add(out, term)
    return out




# grouped parameters and batched block forward --------------------------------

@dataclass
class ConceptLevelParams:
    """All concept blocks of one expert at one level, stacked per concept."""
    pos_W: Tensor   # (K, d_c, Din)
    pos_b: Tensor   # (K, d_c)
    neg_W: Tensor   # (K, d_c, Din)
    neg_b: Tensor   # (K, d_c)
    res_W: Tensor   # (K, d_c, Din)
    res_b: Tensor   # (K, d_c)
    mix_W: Tensor   # (K, 1, 2*d_c)
    mix_b: Tensor   # (K, 1)
    cat_W: Tensor | None = None  # (T, 1, 2*d_c) for ordinal levels
    cat_b: Tensor | None = None  # (T, 1)


@dataclass
class LevelOutput:
    c_pos: Tensor       # (N, K, d_c)
    c_neg: Tensor       # (N, K, d_c)
    p_mix: Tensor       # (N, K, 1)
    residual: Tensor | None  # (N, K, d_c), soft bottleneck only
    c_hat: Tensor       # (N, K, d_c)
    B: Tensor           # (N, K*d_c)
    sup_probs: Tensor   # (N, T): 19 for ordinal level 1, K2 for level 2


def concept_level_forward(x: Tensor, params: ConceptLevelParams,
                          gamma_res: float, ordinal: bool) -> LevelOutput:
    """Run every concept block of one level on a shared input batch."""
    if params.pos_W.shape[2] != x.shape[1]:
        raise ValueError(f"level expects input dim {params.pos_W.shape[2]}, "
                         f"got {x.shape[1]}")
    n, k, d_c = x.shape[0], params.pos_W.shape[0], params.pos_W.shape[1]
    c_pos = ad.leaky_relu(ad.multi_affine(x, params.pos_W, params.pos_b), LEAKY_SLOPE)
    c_neg = ad.leaky_relu(ad.multi_affine(x, params.neg_W, params.neg_b), LEAKY_SLOPE)
    pair = ad.concat([c_pos, c_neg], axis=2)                    # (N, K, 2dc)
    p_mix = ad.sigmoid(ad.grouped_affine(pair, params.mix_W, params.mix_b))
    c_hat = ad.add(ad.mul(p_mix, c_pos), ad.mul(ad.sub(1.0, p_mix), c_neg))
    residual = None
    if gamma_res:
        residual = ad.multi_affine(x, params.res_W, params.res_b)
        c_hat = ad.add(c_hat, ad.mul(residual, gamma_res))
    B = ad.reshape(c_hat, (n, k * d_c))
    if ordinal:
        cat_in = ad.take(pair, L1_CATEGORY_TO_CONCEPT, axis=1)  # (N, 19, 2dc)
        cat_logit = ad.grouped_affine(cat_in, params.cat_W, params.cat_b)
        sup_probs = ad.reshape(ad.sigmoid(cat_logit), (n, L1_TARGET_DIM))
    else:
        sup_probs = ad.reshape(p_mix, (n, k))
    return LevelOutput(c_pos=c_pos, c_neg=c_neg, p_mix=p_mix,
                       residual=residual, c_hat=c_hat, B=B, sup_probs=sup_probs)


@dataclass
class ExpertBundle:
    """Everything one expert pathway produced for a batch."""
    expert_id: str
    z: Tensor                     # (N, d)
    l1: LevelOutput | None
    l2: LevelOutput | None
    head_input: Tensor            # (N, head_dim)
    logits: Tensor                # (N, C)


def head_input_dim(variant: ModelVariant, k1: int, k2: int, d_c: int) -> int:
    if variant.bottleneck == "cbm":
        dim = 0
        if variant.has_l1:
            dim += L1_TARGET_DIM
        if variant.has_l2:
            dim += 2 * k2
        return dim
    dim = 0
    if variant.has_l1:
        dim += k1 * d_c
    if variant.has_l2:
        dim += k2 * d_c
    return dim


def build_head_input(variant: ModelVariant, l1: LevelOutput | None,
                     l2: LevelOutput | None) -> Tensor:
    parts = []
    if variant.bottleneck == "cbm":
        if variant.has_l1:
            parts.append(l1.sup_probs)                          # (N, 19)
        if variant.has_l2:
            pairs = ad.concat([l2.p_mix, ad.sub(1.0, l2.p_mix)], axis=2)
            parts.append(ad.reshape(pairs, (pairs.shape[0], -1)))  # (N, 2*K2)
    else:
        if variant.has_l1:
            parts.append(l1.B)
        if variant.has_l2:
            parts.append(l2.B)
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def expert_head(head_W: Tensor, head_b: Tensor, head_input: Tensor) -> Tensor:
    """Single affine predictor head on the bottleneck representation."""
    if head_W.shape[1] != head_input.shape[1]:
        raise ValueError(f"head expects input dim {head_W.shape[1]}, "
                         f"got {head_input.shape[1]}")
    return ad.add(ad.matmul(head_input, ad.transpose(head_W)), ad.reshape(head_b, (1, -1)))


def apply_linear_head(features: np.ndarray, W: np.ndarray, b: np.ndarray
                      ) -> np.ndarray:
    """Affine head evaluated by ascending-index accumulation.

    Accumulating coordinates in fixed index order makes a zero-padded head
    bit-identical to its restriction on the coordinate prefix (appended
    terms add exact zeros after the shared partial sums), which a blocked
    BLAS matmul does not guarantee. Use this evaluator for the
    representation-chain containment checks.
    """
    X = np.asarray(features, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    acc = np.broadcast_to(b, (X.shape[0], b.shape[0])).copy()
    for k in range(X.shape[1]):
        acc += X[:, k:k + 1] * W.T[k:k + 1, :]
    return acc


def representation_chain(bundle: ExpertBundle, variant: ModelVariant
                         ) -> tuple[Tensor, Tensor, Tensor]:
    """Nested representations (R0, R1, R2) of the soft-bottleneck chain.

    R0 is the expert latent; R1 appends the level-1 concept embeddings and
    the stacked residual projections; R2 appends the level-2 embeddings.
    Each is a coordinate prefix of the next, which is what makes zero-padded
    head transfer exact.
    """
    if variant.bottleneck_kind != "cem_soft":
        raise VariantError("representation chain requires the soft (residual) "
                           "embedding bottleneck")
    r0 = bundle.z
    r1 = r0
    if bundle.l1 is not None:
        n = r0.shape[0]
        res_flat = ad.reshape(bundle.l1.residual, (n, -1))
        r1 = ad.concat([r0, bundle.l1.B, res_flat], axis=1)
    r2 = r1
    if bundle.l2 is not None:
        r2 = ad.concat([r1, bundle.l2.B], axis=1)
    return r0, r1, r2
