"""Interpretability suite: gradient-times-input concept attribution over
three forward paths, fold-level aggregation, class-agnostic evidence
profiles, logit-ablation scores, routing statistics, and per-sample
reasoning traces.

Attribution magnitudes are scale covariant (scaling an embedding by t
scales phi by t) and differ in target scale across the three paths, so
values are comparable within a path only, never across paths.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .concepts import ModelVariant, concept_level_forward, expert_head
from .experts import EXPERT_IDS
from .model import ConceptMoEModel
from .objective import EPSILON
from .synthcohort import (L1_CONCEPT_NAMES, L2_CONCEPT_NAMES, NUM_L1, NUM_L2,
                          CohortSample)

PATHS = ("l1_to_class", "l2_to_class", "l1_to_l2")


@dataclass
class AttributionRecord:
    sample_id: str
    fold: int
    label: int
    path: str
    target: int                 # class index, or L2 concept index for l1_to_l2
    phi: np.ndarray             # (num_experts, num_source_concepts), >= 0
    alpha: np.ndarray           # (num_experts,)


def grad_input_attr(output: Tensor, embedding: Tensor) -> float:
    """|sum_i dy/dc_i * c_i| for a scalar output and a leaf concept embedding."""
    if output.data.size != 1:
        raise ValueError("attribution target must be scalar")
    embedding.zero_grad()
    output.backward()
    if embedding.grad is None:
        return 0.0
    return float(abs(np.sum(embedding.grad * embedding.data)))


def _slice_phi(grad: np.ndarray, value: np.ndarray, k: int, d_c: int) -> np.ndarray:
    contrib = (grad * value).reshape(k, d_c).sum(axis=1)
    return np.abs(contrib)


def attr_paths(model: ConceptMoEModel, sample: CohortSample, *,
               fold: int = 0) -> list[AttributionRecord]:
    """Gradient-times-input records for every available path and target.

    Class paths differentiate each class logit of the expert head with
    respect to the level's slices of the head input; the hierarchy path
    differentiates each level-2 embedding's squared norm with respect to
    the level-1 slices. Requires an embedding (CEM) bottleneck.
    """
    variant = model.variant
    if variant.bottleneck != "cem":
        raise ValueError("gradient-times-input attribution needs the embedding "
                         "bottleneck; scalar variants have no concept embeddings "
                         "in the head path")
    with ad.no_grad():
        out = model.forward([sample], training=False)
    alpha = out.alpha.data[0].copy()
    d_c = model.dims.d_c
    records: list[AttributionRecord] = []

    phi_l1_class = np.zeros((len(EXPERT_IDS), NUM_L1, model.dims.num_classes))
    phi_l2_class = np.zeros((len(EXPERT_IDS), NUM_L2, model.dims.num_classes))
    phi_l1_l2 = np.zeros((len(EXPERT_IDS), NUM_L1, NUM_L2))

    for ei, eid in enumerate(EXPERT_IDS):
        bundle = out.bundles[eid]
        head_W, head_b = model.heads[eid]
        leaf = Tensor(bundle.head_input.data.copy(), requires_grad=True)
        off_l1 = 0
        off_l2 = NUM_L1 * d_c if variant.has_l1 else 0
        for c in range(model.dims.num_classes):
            logits = expert_head(head_W, head_b, leaf)
            target = logits[0, c]
            leaf.zero_grad()
            target.backward()
            g = leaf.grad[0]
            v = leaf.data[0]
            if variant.has_l1:
                sl = slice(off_l1, off_l1 + NUM_L1 * d_c)
                phi_l1_class[ei, :, c] = _slice_phi(g[sl], v[sl], NUM_L1, d_c)
            if variant.has_l2:
                sl = slice(off_l2, off_l2 + NUM_L2 * d_c)
                phi_l2_class[ei, :, c] = _slice_phi(g[sl], v[sl], NUM_L2, d_c)

        if variant.hierarchy == "hier":
            b1_leaf = Tensor(bundle.l1.B.data.copy(), requires_grad=True)
            z_const = Tensor(bundle.z.data.copy())
            for j in range(NUM_L2):
                x2 = ad.concat([z_const, b1_leaf], axis=1)
                l2 = concept_level_forward(x2, model.l2_params[eid],
                                           variant.gamma_res, ordinal=False)
                c2j = l2.c_hat[0, j, :]
                sq_norm = ad.sum_(ad.square(c2j))
                b1_leaf.zero_grad()
                sq_norm.backward()
                phi_l1_l2[ei, :, j] = _slice_phi(b1_leaf.grad[0], b1_leaf.data[0],
                                                 NUM_L1, d_c)

    for c in range(model.dims.num_classes):
        if variant.has_l1:
            records.append(AttributionRecord(sample.sample_id, fold, sample.label,
                                             "l1_to_class", c,
                                             phi_l1_class[:, :, c].copy(), alpha))
        if variant.has_l2:
            records.append(AttributionRecord(sample.sample_id, fold, sample.label,
                                             "l2_to_class", c,
                                             phi_l2_class[:, :, c].copy(), alpha))
    if variant.hierarchy == "hier":
        for j in range(NUM_L2):
            records.append(AttributionRecord(sample.sample_id, fold, sample.label,
                                             "l1_to_l2", j,
                                             phi_l1_l2[:, :, j].copy(), alpha))
    return records


def scorer_attr_l1_to_l2(model: ConceptMoEModel, sample: CohortSample
                         ) -> np.ndarray:
    """Secondary hierarchy view: pre-sigmoid scorer score as the target."""
    if model.variant.hierarchy != "hier":
        raise ValueError("hierarchy attribution requires the hier variant")
    with ad.no_grad():
        out = model.forward([sample], training=False)
    d_c = model.dims.d_c
    phi = np.zeros((len(EXPERT_IDS), NUM_L1, NUM_L2))
    for ei, eid in enumerate(EXPERT_IDS):
        bundle = out.bundles[eid]
        b1_leaf = Tensor(bundle.l1.B.data.copy(), requires_grad=True)
        z_const = Tensor(bundle.z.data.copy())
        params = model.l2_params[eid]
        for j in range(NUM_L2):
            x2 = ad.concat([z_const, b1_leaf], axis=1)
            c_pos = ad.leaky_relu(ad.multi_affine(x2, params.pos_W, params.pos_b), 0.01)
            c_neg = ad.leaky_relu(ad.multi_affine(x2, params.neg_W, params.neg_b), 0.01)
            pair = ad.concat([c_pos, c_neg], axis=2)
            score = ad.grouped_affine(pair, params.mix_W, params.mix_b)[0, j, 0]
            b1_leaf.zero_grad()
            score.backward()
            phi[ei, :, j] = _slice_phi(b1_leaf.grad[0], b1_leaf.data[0], NUM_L1, d_c)
    return phi


# aggregation ------------------------------------------------------------------

@dataclass
class AggregateEntry:
    per_expert_mean: np.ndarray  # (E, K)
    per_expert_std: np.ndarray
    gate_mean: np.ndarray        # (K,)
    gate_std: np.ndarray
    num_folds: int


def aggregate_attr(records: list[AttributionRecord], num_classes: int
                   ) -> dict[tuple[str, int, int], AggregateEntry]:
    """Fold-wise means/stds of attribution, restricted per class.

    Class paths keep only samples whose true label equals the target class;
    the hierarchy path groups by true label with every level-2 target kept.
    Keys are (path, class, target); entries with no samples are absent.
    """
    grouped: dict[tuple[str, int, int, int], list[AttributionRecord]] = {}
    for rec in records:
        if rec.path in ("l1_to_class", "l2_to_class"):
            if rec.label != rec.target:
                continue
            key = (rec.path, rec.target, rec.target, rec.fold)
        else:
            key = (rec.path, rec.label, rec.target, rec.fold)
        grouped.setdefault(key, []).append(rec)

    fold_means: dict[tuple[str, int, int], dict[int, tuple[np.ndarray, np.ndarray]]] = {}
    for (path, cls, target, fold), recs in grouped.items():
        per_expert = np.mean([r.phi for r in recs], axis=0)
        gate = np.mean([r.alpha @ r.phi for r in recs], axis=0)
        fold_means.setdefault((path, cls, target), {})[fold] = (per_expert, gate)

    out = {}
    for key, by_fold in fold_means.items():
        folds = sorted(by_fold)
        pe = np.stack([by_fold[f][0] for f in folds])
        ga = np.stack([by_fold[f][1] for f in folds])
        out[key] = AggregateEntry(
            per_expert_mean=pe.mean(axis=0), per_expert_std=pe.std(axis=0, ddof=0),
            gate_mean=ga.mean(axis=0), gate_std=ga.std(axis=0, ddof=0),
            num_folds=len(folds))
    return out


def _source_names(path: str) -> tuple[str, ...]:
    return L2_CONCEPT_NAMES if path == "l2_to_class" else L1_CONCEPT_NAMES


def aggregates_to_csv(agg: dict[tuple[str, int, int], AggregateEntry],
                      path: str, view: str, meta_line: str | None = None) -> str:
    """One CSV table for a (path, view); view is 'per_expert' or 'gate'."""
    names = _source_names(path)
    buf = io.StringIO()
    if meta_line:
        buf.write(meta_line.rstrip("\n") + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    if view == "per_expert":
        header = ["class", "target"] + [f"{eid}:{c}" for eid in EXPERT_IDS
                                        for c in names]
    else:
        header = ["class", "target"] + list(names)
    writer.writerow(header + ["num_folds"])
    for (p, cls, target), entry in sorted(agg.items()):
        if p != path:
            continue
        values = (entry.per_expert_mean.reshape(-1) if view == "per_expert"
                  else entry.gate_mean)
        writer.writerow([cls, target] + [repr(float(v)) for v in values]
                        + [entry.num_folds])
    return buf.getvalue()


# evidence profiles and ablation -----------------------------------------------

def evidence_profile(alpha: np.ndarray, activations: np.ndarray,
                     epsilon: float = EPSILON) -> np.ndarray:
    """Per-expert share of a concept's activation: a_e = alpha_e p_e / (sum + eps)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    activations = np.asarray(activations, dtype=np.float64)
    weighted = alpha * activations
    return weighted / (weighted.sum() + epsilon)


def logit_ablation(model: ConceptMoEModel, sample: CohortSample, concept: int,
                   class_index: int, *, level: int = 1,
                   neutral: str = "negative",
                   neutral_embeddings: np.ndarray | None = None,
                   epsilon: float = EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Gate-weighted logit change when one concept embedding is neutralized.

    Replaces the concept's slice of the head input with the neutral state
    (the sample's negative concept embedding, or a provided empirical-mean
    embedding per expert) and recomputes the expert head. Returns
    (delta (E,), normalized positive parts (E,)).
    """
    variant = model.variant
    if variant.bottleneck != "cem":
        raise ValueError("logit ablation needs the embedding bottleneck")
    if neutral not in ("negative", "mean"):
        raise ValueError("neutral must be 'negative' or 'mean'")
    if neutral == "mean" and neutral_embeddings is None:
        raise ValueError("neutral='mean' needs neutral_embeddings (E, d_c)")
    with ad.no_grad():
        out = model.forward([sample], training=False)
    d_c = model.dims.d_c
    if level == 1:
        if not variant.has_l1:
            raise ValueError("variant has no level-1 concepts")
        offset = 0
    elif level == 2:
        if not variant.has_l2:
            raise ValueError("variant has no level-2 concepts")
        offset = NUM_L1 * d_c if variant.has_l1 else 0
    else:
        raise ValueError("level must be 1 or 2")
    alpha = out.alpha.data[0]
    deltas = np.zeros(len(EXPERT_IDS))
    for ei, eid in enumerate(EXPERT_IDS):
        bundle = out.bundles[eid]
        head_W, head_b = model.heads[eid]
        base = bundle.head_input.data.copy()
        ablated = base.copy()
        sl = slice(offset + concept * d_c, offset + (concept + 1) * d_c)
        if neutral == "negative":
            level_out = bundle.l1 if level == 1 else bundle.l2
            ablated[0, sl] = level_out.c_neg.data[0, concept, :]
        else:
            ablated[0, sl] = neutral_embeddings[ei]
        with ad.no_grad():
            base_logit = expert_head(head_W, head_b, Tensor(base)).data[0, class_index]
            abl_logit = expert_head(head_W, head_b, Tensor(ablated)).data[0, class_index]
        deltas[ei] = alpha[ei] * (base_logit - abl_logit)
    positive = np.maximum(deltas, 0.0)
    normalized = positive / (positive.sum() + epsilon)
    return deltas, normalized


def routing_stats(model: ConceptMoEModel, samples) -> dict:
    """Class-conditional mean gate weights and the overall routing marginal."""
    if not samples:
        raise ValueError("routing statistics need a nonempty sample set")
    with ad.no_grad():
        out = model.forward(samples, training=False)
    alpha = out.alpha.data
    labels = np.array([s.label for s in samples])
    per_class = {}
    for c in sorted(set(labels.tolist())):
        per_class[int(c)] = alpha[labels == c].mean(axis=0).tolist()
    return {"experts": list(EXPERT_IDS),
            "per_class_mean": per_class,
            "overall_mean": alpha.mean(axis=0).tolist()}


# reasoning traces -----------------------------------------------------------------

TRACE_FORMAT = "cbmoe-trace-v1"


def reasoning_trace(model: ConceptMoEModel, sample: CohortSample, *,
                    top_k: int = 6) -> dict:
    """Machine-readable per-sample justification: gate weights, the top-k
    concepts by gate-aggregated attribution toward the predicted class, and
    mean concept activations."""
    with ad.no_grad():
        out = model.forward([sample], training=False)
    logits = out.fused_logits.data[0]
    predicted = int(np.argmax(logits))
    alpha = out.alpha.data[0]
    records = attr_paths(model, sample)

    contributions = []
    for rec in records:
        if rec.path == "l1_to_l2" or rec.target != predicted:
            continue
        names = _source_names(rec.path)
        gate_phi = rec.alpha @ rec.phi
        level_key = "l1" if rec.path == "l1_to_class" else "l2"
        for k, name in enumerate(names):
            contributions.append({"path": rec.path, "level": level_key,
                                  "concept": name, "index": k,
                                  "phi": float(gate_phi[k])})
    contributions.sort(key=lambda r: -r["phi"])

    activations = {}
    if model.variant.has_l1:
        p1 = np.mean([out.bundles[eid].l1.p_mix.data[0, :, 0]
                      for eid in EXPERT_IDS], axis=0)
        activations["l1"] = {name: float(p1[k])
                             for k, name in enumerate(L1_CONCEPT_NAMES)}
    if model.variant.has_l2:
        p2 = np.mean([out.bundles[eid].l2.p_mix.data[0, :, 0]
                      for eid in EXPERT_IDS], axis=0)
        activations["l2"] = {name: float(p2[j])
                             for j, name in enumerate(L2_CONCEPT_NAMES)}

    top = []
    for item in contributions[:top_k]:
        top.append({**item,
                    "activation": activations[item["level"]][item["concept"]]})
    return {
        "format": TRACE_FORMAT,
        "sample_id": sample.sample_id,
        "true_label": int(sample.label),
        "predicted_class": predicted,
        "class_logits": [float(v) for v in logits],
        "gate_weights": {eid: float(alpha[e]) for e, eid in enumerate(EXPERT_IDS)},
        "top_concepts": top,
        "concept_activations": activations,
    }


def validate_reasoning_trace(trace: dict) -> None:
    """Raise ValueError unless the dict matches the trace schema."""
    def need(cond, msg):
        if not cond:
            raise ValueError(f"invalid reasoning trace: {msg}")

    need(isinstance(trace, dict), "not an object")
    need(trace.get("format") == TRACE_FORMAT, "wrong or missing format tag")
    need(isinstance(trace.get("sample_id"), str), "sample_id must be str")
    need(isinstance(trace.get("true_label"), int), "true_label must be int")
    need(isinstance(trace.get("predicted_class"), int), "predicted_class must be int")
    logits = trace.get("class_logits")
    need(isinstance(logits, list) and all(isinstance(v, float) for v in logits),
         "class_logits must be a float list")
    gates = trace.get("gate_weights")
    need(isinstance(gates, dict) and set(gates) == set(EXPERT_IDS),
         "gate_weights must map every expert id")
    need(all(isinstance(v, float) and v >= 0 for v in gates.values()),
         "gate weights must be nonnegative floats")
    need(abs(sum(gates.values()) - 1.0) < 1e-6, "gate weights must sum to 1")
    top = trace.get("top_concepts")
    need(isinstance(top, list), "top_concepts must be a list")
    for item in top:
        need(isinstance(item, dict), "top_concepts entries must be objects")
        need(item.get("path") in ("l1_to_class", "l2_to_class"), "bad path")
        need(item.get("level") in ("l1", "l2"), "bad level")
        need(isinstance(item.get("concept"), str), "concept must be str")
        need(isinstance(item.get("phi"), float) and item["phi"] >= 0,
             "phi must be a nonnegative float")
        need(isinstance(item.get("activation"), float)
             and 0.0 <= item["activation"] <= 1.0,
             "activation must be a probability")
    acts = trace.get("concept_activations")
    need(isinstance(acts, dict), "concept_activations must be an object")
    for level, mapping in acts.items():
        need(level in ("l1", "l2"), "bad activation level")
        need(isinstance(mapping, dict), "activation level must be an object")
        for name, value in mapping.items():
            need(isinstance(name, str) and isinstance(value, float)
                 and 0.0 <= value <= 1.0, "activations must be probabilities")


def trace_to_json(trace: dict) -> str:
    validate_reasoning_trace(trace)
    return json.dumps(trace, sort_keys=True, indent=1)
