"""Optimization loop and experiment harness: Adam with cosine annealing,
early stopping on validation macro-F1, epoch feature dumps, the
gradient-alignment diagnostic, checkpointing, evaluation, the training-set
subsampling protocol, and a convex linear-probe fitter."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import EXPERT_IDS, interaction_loss
from .metrics import concept_auroc, macro_f1, per_class_scores
from .model import ConceptMoEModel, ModelOutput
from .objective import (LossBreakdown, LossWeights, class_weighted_ce,
                        inverse_frequency_weights, masked_concept_loss,
                        total_loss)
from .rng import substream
from .synthcohort import (L1_CATEGORY_COUNTS, L1_CONCEPT_NAMES, L1_OFFSETS,
                          L2_CONCEPT_NAMES, CohortSample)


class TrainingFault(RuntimeError):
    """Raised on NaN losses/gradients; carries the last good checkpoint."""

    def __init__(self, message: str, last_state=None, run_log=None):
        super().__init__(message)
        self.last_state = last_state
        self.run_log = run_log or []


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 16
    max_epochs: int = 150
    patience: int = 30
    schedule: str = "cosine"
    dropout: float = 0.1
    dump_interval: int = 1
    balanced_sampler: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patience > self.max_epochs:
            raise ValueError("patience must be <= max_epochs")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")


# optimizer -------------------------------------------------------------------

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr_t: float,
              betas=ADAM_BETAS, eps=ADAM_EPS) -> AdamState:
    """Textbook Adam with bias correction; NaN gradients abort the step."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite gradient in {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr_t * m_hat / (np.sqrt(v_hat) + eps)
    return state


def cosine_lr(epoch: int, max_epochs: int, base_lr: float) -> float:
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max_epochs))


# loss assembly -----------------------------------------------------------------

def _concept_targets(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    l1_t = np.stack([s.concept_targets.l1_onehot for s in samples])
    l1_m = np.stack([s.concept_targets.l1_mask for s in samples])
    l2_t = np.stack([s.concept_targets.l2_binary for s in samples])
    l2_m = np.stack([s.concept_targets.l2_mask for s in samples])
    return l1_t, l1_m, l2_t, l2_m


def batch_loss(model: ConceptMoEModel, samples, weights: LossWeights, *,
               training: bool, rng: np.random.Generator | None,
               dropout: float = 0.0, bce_pos_weights=None,
               interaction_noise=None) -> tuple[LossBreakdown, ModelOutput]:
    """Forward a batch and assemble the composite objective.

    Loss components with zero weight are skipped entirely, so their
    gradient contribution is exactly zero (and perturbation passes are
    avoided when the interaction weight is zero).
    """
    out = model.forward(samples, training=training, rng=rng,
                        model_dropout=dropout if training else 0.0)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    cls = class_weighted_ce(out.fused_logits, labels, weights.class_weights)
    l1_t, l1_m, l2_t, l2_m = _concept_targets(samples)

    l1_loss = None
    if model.variant.has_l1 and weights.lambda1 > 0:
        probs = {eid: out.bundles[eid].l1.sup_probs for eid in EXPERT_IDS}
        l1_loss = masked_concept_loss(probs, l1_t, l1_m, level=1,
                                      epsilon=weights.epsilon,
                                      pos_weights=bce_pos_weights[0] if bce_pos_weights else None)
    l2_loss = None
    if model.variant.has_l2 and weights.lambda2 > 0:
        probs = {eid: out.bundles[eid].l2.sup_probs for eid in EXPERT_IDS}
        l2_loss = masked_concept_loss(probs, l2_t, l2_m, level=2,
                                      epsilon=weights.epsilon,
                                      pos_weights=bce_pos_weights[1] if bce_pos_weights else None)
    int_loss = None
    if weights.lambda_int > 0:
        if rng is None and interaction_noise is None:
            raise ValueError("interaction loss needs an rng for perturbations")
        clean = out.expert_probs()
        if interaction_noise is not None:
            perturbed = [model.perturbed_expert_probs(out, m, noise=interaction_noise[m])
                         for m in (0, 1)]
        else:
            perturbed = [model.perturbed_expert_probs(out, m, rng) for m in (0, 1)]
        int_loss = interaction_loss(clean, perturbed)
    return total_loss(cls, weights, l1_loss, l2_loss, int_loss), out


# checkpoints ---------------------------------------------------------------------

CHECKPOINT_FORMAT = "cbmoe-checkpoint-v1"


def checkpoint_to_json(state: dict[str, np.ndarray], meta: dict | None = None) -> str:
    tensors = {}
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        tensors[name] = {
            "shape": list(arr.shape),
            "dtype": "<f8",
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    return json.dumps({"format": CHECKPOINT_FORMAT, "meta": meta or {},
                       "tensors": tensors}, sort_keys=True)


def checkpoint_from_json(text: str) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(text)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format {payload.get('format')!r}")
    state = {}
    for name, rec in payload["tensors"].items():
        raw = base64.b64decode(rec["data"])
        state[name] = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
    return state, payload.get("meta", {})


# evaluation -----------------------------------------------------------------------

@dataclass
class EvalResult:
    predictions: np.ndarray
    labels: np.ndarray
    macro_f1: float
    per_class: list
    concept_aurocs: dict


def predict_logits(model: ConceptMoEModel, samples) -> tuple[np.ndarray, ModelOutput]:
    with ad.no_grad():
        out = model.forward(samples, training=False)
    return out.fused_logits.data.copy(), out


def evaluate(model: ConceptMoEModel, samples) -> EvalResult:
    if not samples:
        raise ValueError("evaluation set is empty")
    logits, out = predict_logits(model, samples)
    labels = np.array([s.label for s in samples])
    preds = np.argmax(logits, axis=1)
    l1_t, l1_m, l2_t, l2_m = _concept_targets(samples)
    aurocs: dict[str, dict[str, float | None]] = {}
    for eid in EXPERT_IDS:
        bundle = out.bundles[eid]
        per_concept: dict[str, float | None] = {}
        if bundle.l1 is not None:
            probs = bundle.l1.sup_probs.data
            for k, name in enumerate(L1_CONCEPT_NAMES):
                vals = []
                off, v = L1_OFFSETS[k], L1_CATEGORY_COUNTS[k]
                for cat in range(v):
                    a = concept_auroc(probs[:, off + cat], l1_t[:, off + cat],
                                      l1_m[:, k])
                    if a is not None:
                        vals.append(a)
                per_concept[name] = float(np.mean(vals)) if vals else None
        if bundle.l2 is not None:
            probs = bundle.l2.sup_probs.data
            for j, name in enumerate(L2_CONCEPT_NAMES):
                per_concept[name] = concept_auroc(probs[:, j], l2_t[:, j], l2_m[:, j])
        aurocs[eid] = per_concept
    return EvalResult(predictions=preds, labels=labels,
                      macro_f1=macro_f1(preds, labels, model.dims.num_classes),
                      per_class=per_class_scores(preds, labels, model.dims.num_classes),
                      concept_aurocs=aurocs)


# epoch dumps ------------------------------------------------------------------------

def epoch_dump_records(model: ConceptMoEModel, samples, split_tag: str) -> list[dict]:
    """Per-sample tracked features: mean over experts of the expert latent
    and of the concept-embedding blocks; scalar probabilities for CBM runs."""
    if not samples:
        return []
    with ad.no_grad():
        out = model.forward(samples, training=False)
    n = len(samples)
    z = np.mean([out.bundles[eid].z.data for eid in EXPERT_IDS], axis=0)
    records = []
    b1 = b2 = p1 = p2 = None
    if model.variant.has_l1:
        b1 = np.mean([out.bundles[eid].l1.B.data for eid in EXPERT_IDS], axis=0)
    if model.variant.has_l2:
        b2 = np.mean([out.bundles[eid].l2.B.data for eid in EXPERT_IDS], axis=0)
    if model.variant.bottleneck == "cbm":
        if model.variant.has_l1:
            p1 = np.mean([out.bundles[eid].l1.sup_probs.data
                          for eid in EXPERT_IDS], axis=0)
        if model.variant.has_l2:
            pm = np.mean([out.bundles[eid].l2.p_mix.data[:, :, 0]
                          for eid in EXPERT_IDS], axis=0)
            p2 = np.concatenate([pm[:, :, None], 1.0 - pm[:, :, None]],
                                axis=2).reshape(n, -1)
    for i, s in enumerate(samples):
        rec = {"sample_id": s.sample_id, "split": split_tag,
               "label": int(s.label), "z": z[i].tolist()}
        if b1 is not None:
            rec["b1"] = b1[i].tolist()
        if b2 is not None:
            rec["b2"] = b2[i].tolist()
        if p1 is not None:
            rec["p1"] = p1[i].tolist()
        if p2 is not None:
            rec["p2"] = p2[i].tolist()
        records.append(rec)
    return records


# gradient-alignment diagnostic ----------------------------------------------------

def _flat_grads(params: dict[str, Tensor]) -> np.ndarray:
    parts = []
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(np.asarray(g, dtype=np.float64).reshape(-1))
    return np.concatenate(parts)


def alignment_diagnostic(model: ConceptMoEModel, probe_samples,
                         weights: LossWeights, seed: int, epoch: int
                         ) -> tuple[float | None, float | None]:
    """(rho, B_grad) estimates on the probe batch.

    rho = <g_y, g_a> / ||g_y||^2 and B_grad = ||g_y + g_a||^2 / ||g_y||^2,
    where g_y is the task-loss gradient and g_a the gradient of the
    lambda-weighted auxiliary terms. Missing (None) when ||g_y|| = 0.
    """
    def run(component: str) -> np.ndarray:
        rng = substream(seed, "probe", epoch)
        breakdown, _ = batch_loss(model, probe_samples, weights, training=False,
                                  rng=rng, dropout=0.0)
        ad.zero_grads(model.params)
        if component == "cls":
            breakdown.cls.backward()
        else:
            aux = None
            pairs = [(breakdown.concept_l1, weights.lambda1),
                     (breakdown.concept_l2, weights.lambda2),
                     (breakdown.interaction, weights.lambda_int)]
            for tensor_, lam in pairs:
                if tensor_ is not None and lam > 0:
                    term = ad.mul(tensor_, lam)
                    aux = term if aux is None else ad.add(aux, term)
            if aux is None:
                return np.zeros(sum(p.data.size for p in model.params.values()))
            aux.backward()
        g = _flat_grads(model.params)
        ad.zero_grads(model.params)
        return g

    g_y = run("cls")
    g_a = run("aux")
    denom = float(g_y @ g_y)
    if denom == 0.0:
        return None, None
    rho = float(g_y @ g_a) / denom
    b_grad = float((g_y + g_a) @ (g_y + g_a)) / denom
    return rho, b_grad


# training loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_f1: float
    run_log: list[dict]
    dumps: list[dict]            # one entry per dumped epoch
    epochs_run: int
    test_eval: EvalResult | None = None


def _bce_pos_weights(samples, variant):
    """Balanced-BCE weights for the hard-bottleneck recipe: per target entry,
    weight positives by n/(2 n_pos) and negatives by n/(2 n_neg)."""
    l1_t, l1_m, l2_t, l2_m = _concept_targets(samples)

    def balance(targets, mask_expanded):
        n = np.maximum(mask_expanded.sum(axis=0), 1.0)
        pos = (targets * mask_expanded).sum(axis=0)
        neg = n - pos
        w_pos = n / (2.0 * np.maximum(pos, 1.0))
        w_neg = n / (2.0 * np.maximum(neg, 1.0))
        return w_pos, w_neg

    l1_weights = None
    if variant.has_l1:
        mask_exp = np.repeat(l1_m, L1_CATEGORY_COUNTS, axis=1)
        l1_weights = balance(l1_t, mask_exp)
    l2_weights = None
    if variant.has_l2:
        l2_weights = balance(l2_t, l2_m)
    return l1_weights, l2_weights


def train_fold(model: ConceptMoEModel, train_samples, val_samples, test_samples,
               cfg: TrainConfig, loss_weights: LossWeights, *, seed: int,
               probe: bool = True, evaluate_test: bool = True) -> TrainResult:
    """Optimize one fold; early-stop on validation macro-F1.

    The best checkpoint is the earliest epoch attaining the maximum
    validation macro-F1 (strictly-greater updates). Feature dumps for the
    validation and test samples are emitted every `dump_interval` epochs,
    and the gradient-alignment diagnostic runs on the first training batch
    (frozen per run) at the end of every epoch.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must be nonempty")
    train_patients = {s.patient_id for s in train_samples}
    for other in (val_samples, test_samples or []):
        overlap = train_patients & {s.patient_id for s in other}
        if overlap:
            raise ValueError(f"patient leakage across splits: {sorted(overlap)[:3]}")

    labels = np.array([s.label for s in train_samples])
    weights = LossWeights(
        lambda1=loss_weights.lambda1, lambda2=loss_weights.lambda2,
        lambda_int=loss_weights.lambda_int,
        class_weights=inverse_frequency_weights(labels, model.dims.num_classes),
        epsilon=loss_weights.epsilon)
    pos_weights = None
    if model.variant.bottleneck_kind == "cem_hard":
        pos_weights = _bce_pos_weights(train_samples, model.variant)

    order_rng = substream(seed, "train", "order")
    noise_rng = substream(seed, "train", "noise")
    probe_samples = None
    adam = AdamState()
    best_state = model.state_arrays()
    best_epoch, best_val, since_best = -1, -np.inf, 0
    run_log: list[dict] = []
    dumps: list[dict] = []

    sample_weights = None
    if cfg.balanced_sampler or model.variant.bottleneck_kind == "cem_hard":
        w = inverse_frequency_weights(labels, model.dims.num_classes)[labels]
        sample_weights = w / w.sum()

    for epoch in range(cfg.max_epochs):
        lr_t = (cosine_lr(epoch, cfg.max_epochs, cfg.lr)
                if cfg.schedule == "cosine" else cfg.lr)
        if sample_weights is None:
            order = order_rng.permutation(len(train_samples))
        else:
            order = order_rng.choice(len(train_samples), size=len(train_samples),
                                     replace=True, p=sample_weights)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            if probe_samples is None:
                probe_samples = list(batch)
            breakdown, _ = batch_loss(model, batch, weights, training=True,
                                      rng=noise_rng, dropout=cfg.dropout,
                                      bce_pos_weights=pos_weights)
            if not np.isfinite(breakdown.total.data):
                raise TrainingFault("training loss diverged to non-finite value",
                                    last_state=best_state, run_log=run_log)
            ad.zero_grads(model.params)
            breakdown.total.backward()
            try:
                adam_step(model.params, adam, lr_t)
            except TrainingFault as fault:
                fault.last_state = best_state
                fault.run_log = run_log
                raise
            epoch_losses.append(breakdown.values())

        val_eval = evaluate(model, val_samples)
        rho = b_grad = None
        if probe and probe_samples is not None:
            rho, b_grad = alignment_diagnostic(model, probe_samples, weights,
                                               seed, epoch)
        mean_losses = {k: float(np.mean([e[k] for e in epoch_losses]))
                       for k in epoch_losses[0]}
        run_log.append({"epoch": epoch, "lr": lr_t, **{f"loss_{k}": v
                        for k, v in mean_losses.items()},
                        "val_macro_f1": val_eval.macro_f1,
                        "rho": rho, "b_grad": b_grad})

        if cfg.dump_interval and epoch % cfg.dump_interval == 0:
            records = (epoch_dump_records(model, val_samples, "val")
                       + epoch_dump_records(model, test_samples or [], "test"))
            dumps.append({"epoch": epoch, "records": records})

        if val_eval.macro_f1 > best_val:
            best_val = val_eval.macro_f1
            best_epoch = epoch
            best_state = model.state_arrays()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.load_state_arrays(best_state)
    test_eval = evaluate(model, test_samples) if (evaluate_test and test_samples) else None
    return TrainResult(best_state=best_state, best_epoch=best_epoch,
                       best_val_f1=best_val, run_log=run_log, dumps=dumps,
                       epochs_run=len(run_log), test_eval=test_eval)


# subsampling protocol ------------------------------------------------------------------

@dataclass
class SubsampleResult:
    sizes: list[int]
    repeats: int
    runs: list[dict]             # size, repeat, test_macro_f1, best_epoch
    summary: dict[int, dict]     # size -> {mean, std, sem}


def scaled_sizes(pool_size: int, reference=(50, 100, 150, 164)) -> list[int]:
    """Reference subsample grid scaled proportionally to the available pool."""
    sizes = sorted({max(1, round(pool_size * r / reference[-1])) for r in reference})
    return [min(s, pool_size) for s in sizes]


def subsample_protocol(train_pool, val_samples, test_samples, sizes, repeats,
                       model_factory, cfg: TrainConfig, loss_weights: LossWeights,
                       *, seed: int) -> SubsampleResult:
    """Train on random training subsets of each size with val/test held fixed."""
    for size in sizes:
        if size > len(train_pool):
            raise ValueError(f"subsample size {size} exceeds pool {len(train_pool)}")
    runs = []
    for size in sizes:
        for rep in range(repeats):
            draw_rng = substream(seed, "subsample", "draw", size, rep)
            idx = np.sort(draw_rng.choice(len(train_pool), size=size, replace=False))
            subset = [train_pool[i] for i in idx]
            run_seed = int(substream(seed, "subsample", "runseed", size,
                                     rep).integers(2 ** 31))
            model = model_factory(run_seed)
            result = train_fold(model, subset, val_samples, test_samples, cfg,
                                loss_weights, seed=run_seed, probe=False)
            runs.append({"size": size, "repeat": rep,
                         "test_macro_f1": result.test_eval.macro_f1,
                         "best_epoch": result.best_epoch,
                         "subset_indices": idx.tolist()})
    summary = {}
    for size in sizes:
        scores = np.array([r["test_macro_f1"] for r in runs if r["size"] == size])
        summary[size] = {"mean": float(scores.mean()),
                         "std": float(scores.std(ddof=0)),
                         "sem": float(scores.std(ddof=0) / np.sqrt(len(scores)))}
    return SubsampleResult(sizes=list(sizes), repeats=repeats, runs=runs,
                           summary=summary)


# linear probes (representation-chain checks) ----------------------------------------------

def fit_linear_head(features: np.ndarray, labels, num_classes: int,
                    init: tuple[np.ndarray, np.ndarray] | None = None,
                    max_iter: int = 2000, tol: float = 1e-12
                    ) -> tuple[np.ndarray, np.ndarray, float]:
    """Fit a softmax-regression head by full-batch descent with backtracking.

    The line search only accepts strict decreases, so warm-starting from an
    embedded smaller head can never end with a larger loss. Returns
    (W, b, final mean cross-entropy).
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    n, d = X.shape
    Y = np.zeros((n, num_classes))
    Y[np.arange(n), y] = 1.0
    if init is None:
        W = np.zeros((num_classes, d))
        b = np.zeros(num_classes)
    else:
        W, b = init[0].copy(), init[1].copy()

    def loss_of(Wm, bv):
        z = X @ Wm.T + bv
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(n), y].mean())

    cur = loss_of(W, b)
    step = 1.0
    for _ in range(max_iter):
        z = X @ W.T + b
        z = z - z.max(axis=1, keepdims=True)
        P = np.exp(z)
        P /= P.sum(axis=1, keepdims=True)
        gW = (P - Y).T @ X / n
        gb = (P - Y).mean(axis=0)
        gnorm2 = float((gW * gW).sum() + (gb * gb).sum())
        if gnorm2 < 1e-24:
            break
        t = step
        improved = False
        for _ls in range(60):
            cand = loss_of(W - t * gW, b - t * gb)
            if cand < cur - 1e-4 * t * gnorm2:
                W, b = W - t * gW, b - t * gb
                improvement = cur - cand
                cur = cand
                step = min(t * 2.0, 1e6)
                improved = True
                break
            t *= 0.5
        if not improved or improvement < tol:
            break
    return W, b, cur
