"""Full network assembly: encoders -> gate + four expert pathways ->
concept blocks -> per-expert heads -> fused prediction.

Parameters live in a flat name -> Tensor dict (the unit the optimizer and
checkpoints operate on) with structured views over the same tensors for
the forward pass. Initialization order is fixed and seeded, so identical
(dims, variant, seed) yield identical parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .concepts import (ConceptLevelParams, ExpertBundle, LevelOutput,
                       ModelVariant, build_head_input, concept_level_forward,
                       expert_head, fuse_predict, gate, head_input_dim,
                       level2_input)
from .encoders import (EncoderParams, GNNLayer, GNNParams, MILParams,
                       encode_batch)
from .experts import (EXPERT_IDS, ExpertMLP, ExpertSet, expert_forward,
                      perturb_modality)
from .rng import substream
from .synthcohort import L1_TARGET_DIM, NUM_L1, NUM_L2


@dataclass(frozen=True)
class ModelDims:
    patch_dim: int
    graph_node_dim: int
    num_classes: int = 4
    d: int = 256
    d_c: int = 16
    gnn_layers: int = 3
    gnn_hidden: int = 256
    gnn_dropout: float = 0.1
    patch_cap: int = 16

    @property
    def expert_hidden(self) -> int:
        return self.d


@dataclass
class ModelOutput:
    e1: Tensor
    e2: Tensor
    alpha: Tensor                      # (N, 4) gate weights
    bundles: dict[str, ExpertBundle]
    fused_logits: Tensor               # (N, C)
    dropout_masks: dict[str, np.ndarray | None] = field(default_factory=dict)

    def expert_probs(self) -> dict[str, Tensor]:
        return {eid: ad.softmax(b.logits, axis=-1)
                for eid, b in self.bundles.items()}


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _lin(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)


class ConceptMoEModel:
    def __init__(self, dims: ModelDims, variant: ModelVariant,
                 perturb_sigma_scale: float = 1.0):
        self.dims = dims
        self.variant = variant
        self.perturb_sigma_scale = perturb_sigma_scale
        self.params: dict[str, Tensor] = {}
        self.encoder: EncoderParams | None = None
        self.experts: ExpertSet | None = None
        self.l1_params: dict[str, ConceptLevelParams] = {}
        self.l2_params: dict[str, ConceptLevelParams] = {}
        self.heads: dict[str, tuple[Tensor, Tensor]] = {}
        self.gate_params: tuple[Tensor, Tensor] | None = None

    # parameter construction ------------------------------------------------
    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def init_params(self, seed: int) -> "ConceptMoEModel":
        rng = substream(seed, "init")
        d, dc = self.dims.d, self.dims.d_c
        pd, nd = self.dims.patch_dim, self.dims.graph_node_dim
        gh = self.dims.gnn_hidden

        self.encoder = EncoderParams(
            d=d,
            mil=MILParams(
                V=self._param("mil.V", _he(rng, (d, pd), pd)),
                U=self._param("mil.U", _he(rng, (d, pd), pd)),
                w=self._param("mil.w", _lin(rng, (d, 1), d)),
                proj_W=self._param("mil.proj_W", _lin(rng, (d, pd), pd)),
                proj_b=self._param("mil.proj_b", np.zeros(d)),
            ),
            gnn=GNNParams(
                layers=[
                    GNNLayer(
                        W_self=self._param(f"gnn.layer{i}.W_self",
                                           _he(rng, (gh, nd if i == 0 else gh),
                                               nd if i == 0 else gh)),
                        W_nbr=self._param(f"gnn.layer{i}.W_nbr",
                                          _he(rng, (gh, nd if i == 0 else gh),
                                              nd if i == 0 else gh)),
                        b=self._param(f"gnn.layer{i}.b", np.zeros(gh)),
                    )
                    for i in range(self.dims.gnn_layers)
                ],
                pool_V=self._param("gnn.pool_V", _he(rng, (d, gh), gh)),
                pool_U=self._param("gnn.pool_U", _he(rng, (d, gh), gh)),
                pool_w=self._param("gnn.pool_w", _lin(rng, (d, 1), d)),
                proj_W=self._param("gnn.proj_W", _lin(rng, (d, gh), gh)),
                proj_b=self._param("gnn.proj_b", np.zeros(d)),
                dropout=self.dims.gnn_dropout,
            ),
            patch_cap=self.dims.patch_cap,
        )

        eh = self.dims.expert_hidden
        mlps = {}
        for eid in EXPERT_IDS:
            mlps[eid] = ExpertMLP(
                W1=self._param(f"expert.{eid}.W1", _he(rng, (eh, 2 * d), 2 * d)),
                b1=self._param(f"expert.{eid}.b1", np.zeros(eh)),
                W2=self._param(f"expert.{eid}.W2", _lin(rng, (d, eh), eh)),
                b2=self._param(f"expert.{eid}.b2", np.zeros(d)),
            )
        self.experts = ExpertSet(experts=mlps,
                                 perturb_sigma_scale=self.perturb_sigma_scale)

        for eid in EXPERT_IDS:
            if self.variant.has_l1:
                self.l1_params[eid] = self._init_level(rng, eid, "l1", NUM_L1, d,
                                                       ordinal=True)
            if self.variant.has_l2:
                l2_in = d + NUM_L1 * dc if self.variant.hierarchy == "hier" else d
                self.l2_params[eid] = self._init_level(rng, eid, "l2", NUM_L2,
                                                       l2_in, ordinal=False)

        head_in = head_input_dim(self.variant, NUM_L1, NUM_L2, dc)
        c = self.dims.num_classes
        for eid in EXPERT_IDS:
            self.heads[eid] = (
                self._param(f"head.{eid}.W", _lin(rng, (c, head_in), head_in)),
                self._param(f"head.{eid}.b", np.zeros(c)),
            )
        self.gate_params = (
            self._param("gate.W", _lin(rng, (len(EXPERT_IDS), 2 * d), 2 * d)),
            self._param("gate.b", np.zeros(len(EXPERT_IDS))),
        )
        return self

    def _init_level(self, rng, eid: str, level: str, k: int, d_in: int,
                    ordinal: bool) -> ConceptLevelParams:
        dc = self.dims.d_c
        pre = f"concepts.{eid}.{level}"
        kwargs = dict(
            pos_W=self._param(f"{pre}.pos_W",
                              np.stack([_he(rng, (dc, d_in), d_in) for _ in range(k)])),
            pos_b=self._param(f"{pre}.pos_b", np.zeros((k, dc))),
            neg_W=self._param(f"{pre}.neg_W",
                              np.stack([_he(rng, (dc, d_in), d_in) for _ in range(k)])),
            neg_b=self._param(f"{pre}.neg_b", np.zeros((k, dc))),
            res_W=self._param(f"{pre}.res_W",
                              np.stack([_lin(rng, (dc, d_in), d_in) for _ in range(k)])),
            res_b=self._param(f"{pre}.res_b", np.zeros((k, dc))),
            mix_W=self._param(f"{pre}.mix_W",
                              np.stack([_lin(rng, (1, 2 * dc), 2 * dc) for _ in range(k)])),
            mix_b=self._param(f"{pre}.mix_b", np.zeros((k, 1))),
        )
        if ordinal:
            kwargs["cat_W"] = self._param(
                f"{pre}.cat_W",
                np.stack([_lin(rng, (1, 2 * dc), 2 * dc) for _ in range(L1_TARGET_DIM)]))
            kwargs["cat_b"] = self._param(f"{pre}.cat_b",
                                          np.zeros((L1_TARGET_DIM, 1)))
        return ConceptLevelParams(**kwargs)

    # forward passes ----------------------------------------------------------
    def forward(self, samples, *, training: bool = False,
                rng: np.random.Generator | None = None,
                model_dropout: float = 0.0) -> ModelOutput:
        e1, e2 = encode_batch(samples, self.encoder, training=training, rng=rng)
        return self.forward_from_embeddings(e1, e2, training=training, rng=rng,
                                            model_dropout=model_dropout)

    def forward_from_embeddings(self, e1: Tensor, e2: Tensor, *,
                                training: bool = False,
                                rng: np.random.Generator | None = None,
                                model_dropout: float = 0.0,
                                dropout_masks: dict | None = None) -> ModelOutput:
        n = e1.shape[0]
        masks: dict[str, np.ndarray | None] = {}
        if dropout_masks is not None:
            masks = dropout_masks
        elif training and model_dropout > 0.0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            masks = {eid: (rng.random((n, self.dims.expert_hidden)) >= model_dropout)
                     / (1.0 - model_dropout) for eid in EXPERT_IDS}
        else:
            masks = {eid: None for eid in EXPERT_IDS}

        alpha = gate(e1, e2, *self.gate_params)
        bundles = {}
        for eid in EXPERT_IDS:
            bundles[eid] = self._expert_pathway(eid, e1, e2, masks[eid])
        fused = fuse_predict(alpha, [bundles[eid].logits for eid in EXPERT_IDS])
        return ModelOutput(e1=e1, e2=e2, alpha=alpha, bundles=bundles,
                           fused_logits=fused, dropout_masks=masks)

    def _expert_pathway(self, eid: str, e1: Tensor, e2: Tensor,
                        dropout_mask: np.ndarray | None) -> ExpertBundle:
        mlp = self.experts.experts[eid]
        x = ad.concat([e1, e2], axis=1)
        h = ad.leaky_relu(ad.add(ad.matmul(x, ad.transpose(mlp.W1)),
                                 ad.reshape(mlp.b1, (1, -1))), 0.01)
        if dropout_mask is not None:
            h = ad.mul(h, Tensor(dropout_mask))
        z = ad.add(ad.matmul(h, ad.transpose(mlp.W2)), ad.reshape(mlp.b2, (1, -1)))

        gamma = self.variant.gamma_res
        # soft CEM carries the residual; cbm/hard drop it. The residual
        # tensor is still materialized for chain inspection when gamma = 1.
        l1 = None
        if self.variant.has_l1:
            l1 = concept_level_forward(z, self.l1_params[eid], gamma, ordinal=True)
        l2 = None
        if self.variant.has_l2:
            if self.variant.hierarchy == "hier":
                x2 = level2_input(z, l1.B)
            else:
                x2 = z
            l2 = concept_level_forward(x2, self.l2_params[eid], gamma, ordinal=False)
        head_in = build_head_input(self.variant, l1, l2)
        logits = expert_head(*self.heads[eid], head_in)
        return ExpertBundle(expert_id=eid, z=z, l1=l1, l2=l2,
                            head_input=head_in, logits=logits)

    def perturbed_expert_probs(self, output: ModelOutput, modality: int,
                               rng: np.random.Generator | None = None,
                               noise: np.ndarray | None = None) -> dict[str, Tensor]:
        """Per-expert class distributions after perturbing one modality.

        Noise is drawn fresh per call unless a pre-drawn array is supplied
        (finite-difference harnesses need the noise held constant).
        """
        e1, e2 = output.e1, output.e2
        if modality not in (0, 1):
            raise ValueError("modality must be 0 or 1")
        target = e1 if modality == 0 else e2
        if noise is not None:
            perturbed = ad.add(target, Tensor(noise))
        else:
            perturbed = perturb_modality(target, self.experts.perturb_sigma_scale, rng)
        if modality == 0:
            e1 = perturbed
        else:
            e2 = perturbed
        probs = {}
        for eid in EXPERT_IDS:
            bundle = self._expert_pathway(eid, e1, e2, output.dropout_masks[eid])
            probs[eid] = ad.softmax(bundle.logits, axis=-1)
        return probs

    # parameter plumbing --------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k].data = arr.copy()


