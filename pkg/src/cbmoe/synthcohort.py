"""Synthetic multimodal cohorts with class-linked concept annotations.

Each "slide" is a bag of patch feature vectors plus a cell graph. Class
labels determine a fixed concept profile (an ordinal level per morphology
concept, a sign per biomarker), and the features are synthesized so that
low-dimensional statistics encode that profile: concept 0 shifts the
feature mean, concept 1 scales the per-item spread, concept 2 offsets the
edge probability of the Erdos-Renyi graph, and the full profile is mixed
into every feature through a fixed random projection. Concept targets are
stored noise-free; `concept_noise` perturbs only the feature synthesis.

Cohorts serialize to JSON (see `cohort_to_json` for the layout) and split
at the patient level so no patient straddles train/val/test.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .rng import substream

# Level-1 morphology concepts are ordinal with these category counts; the
# flattened one-hot target therefore has 4+3+5+4+3 = 19 entries. Level-2
# biomarkers are single binary targets.
L1_CATEGORY_COUNTS = (4, 3, 5, 4, 3)
NUM_L1 = len(L1_CATEGORY_COUNTS)
L1_TARGET_DIM = sum(L1_CATEGORY_COUNTS)
NUM_L2 = 5

L1_CONCEPT_NAMES = ("cellularity", "pleomorphism", "mitotic", "necrosis", "rosenthal")
L2_CONCEPT_NAMES = ("gfap", "synaptophysin", "ini1", "h3k27m", "alk1")

# offsets of each concept's categories inside the flat 19-entry target
L1_OFFSETS = tuple(int(x) for x in np.cumsum((0,) + L1_CATEGORY_COUNTS[:-1]))


class CohortConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CohortConfig:
    num_patients: int = 100
    slides_per_patient: int = 2
    num_classes: int = 4
    patch_dim: int = 32
    patches_per_slide_range: tuple[int, int] = (8, 16)
    graph_node_dim: int = 16
    graph_nodes_range: tuple[int, int] = (8, 16)
    edge_probability: float = 0.25
    concept_noise: float = 0.25
    mask_rate_l1: float = 0.3
    mask_rate_l2: float = 0.3
    # label-irrelevant nuisance factors mixed into both modalities' features;
    # they dilute the class signal without touching the concept targets
    distractor_dim: int = 0
    distractor_scale: float = 1.0
    # "random": independent per-class profiles; "adjacent": classes differ
    # from a shared base profile in only two concept coordinates, so
    # discrimination needs precise concept readout
    profile_mode: str = "random"
    # "uniform": near-equal class sizes; "geometric": class c gets a share
    # proportional to 0.55^c (rare late classes), coverage still guaranteed
    class_balance: str = "uniform"
    seed: int = 0

    def validate(self) -> "CohortConfig":
        counts = {
            "num_patients": self.num_patients,
            "slides_per_patient": self.slides_per_patient,
            "num_classes": self.num_classes,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise CohortConfigError(f"{name} must be >= 1, got {value}")
        if self.patch_dim < 2 or self.graph_node_dim < 2:
            raise CohortConfigError("patch_dim and graph_node_dim must be >= 2")
        for name, (lo, hi) in {
            "patches_per_slide_range": self.patches_per_slide_range,
            "graph_nodes_range": self.graph_nodes_range,
        }.items():
            if lo < 1 or hi < lo:
                raise CohortConfigError(f"{name} must satisfy 1 <= min <= max")
        for name, frac in {
            "edge_probability": self.edge_probability,
            "mask_rate_l1": self.mask_rate_l1,
            "mask_rate_l2": self.mask_rate_l2,
        }.items():
            if not 0.0 <= frac <= 1.0:
                raise CohortConfigError(f"{name} must lie in [0, 1], got {frac}")
        if self.concept_noise < 0.0:
            raise CohortConfigError("concept_noise must be >= 0")
        if self.distractor_dim < 0 or self.distractor_scale < 0.0:
            raise CohortConfigError("distractor settings must be >= 0")
        if self.profile_mode not in ("random", "adjacent"):
            raise CohortConfigError("profile_mode must be 'random' or 'adjacent'")
        if self.class_balance not in ("uniform", "geometric"):
            raise CohortConfigError("class_balance must be 'uniform' or 'geometric'")
        return self


@dataclass
class ConceptTargets:
    l1_onehot: np.ndarray  # (19,) binary, one-hot within each concept group
    l1_mask: np.ndarray    # (5,) binary, 1 = observed
    l2_binary: np.ndarray  # (5,) binary
    l2_mask: np.ndarray    # (5,) binary


@dataclass
class Graph:
    nodes: np.ndarray              # (n_nodes, graph_node_dim)
    edges: list[tuple[int, int]]   # undirected, i < j


@dataclass
class CohortSample:
    patient_id: str
    sample_id: str
    patches: np.ndarray   # (n_patches, patch_dim)
    graph: Graph
    concept_targets: ConceptTargets
    label: int


@dataclass(frozen=True)
class ClassProfile:
    """Ground-truth concept assignment for one class."""
    l1_levels: tuple[int, ...]  # ordinal level per morphology concept
    l2_signs: tuple[int, ...]   # 0/1 per biomarker

    def latent(self) -> np.ndarray:
        u = [lv / (v - 1) for lv, v in zip(self.l1_levels, L1_CATEGORY_COUNTS)]
        return np.array(u + list(self.l2_signs), dtype=np.float64)


def class_profiles(cfg: CohortConfig) -> list[ClassProfile]:
    """Fixed class -> concept-profile lookup; profiles are pairwise distinct."""
    rng = substream(cfg.seed, "cohort", "profiles")
    profiles: list[ClassProfile] = []
    seen = set()
    if cfg.profile_mode == "adjacent":
        base_levels = [int(rng.integers(1, v - 1)) for v in L1_CATEGORY_COUNTS]
        base_signs = [int(rng.integers(0, 2)) for _ in range(NUM_L2)]
        for c in range(cfg.num_classes):
            for _attempt in range(1000):
                levels = list(base_levels)
                signs = list(base_signs)
                k = int(rng.integers(0, NUM_L1))
                levels[k] = min(L1_CATEGORY_COUNTS[k] - 1,
                                max(0, levels[k] + (1 if rng.random() < 0.5 else -1)))
                j = int(rng.integers(0, NUM_L2))
                signs[j] = 1 - signs[j]
                key = (tuple(levels), tuple(signs))
                if key not in seen:
                    seen.add(key)
                    profiles.append(ClassProfile(key[0], key[1]))
                    break
            else:  # pragma: no cover
                raise CohortConfigError("could not draw distinct class profiles")
        return profiles
    for _ in range(cfg.num_classes):
        for _attempt in range(1000):
            levels = tuple(int(rng.integers(0, v)) for v in L1_CATEGORY_COUNTS)
            signs = tuple(int(rng.integers(0, 2)) for _ in range(NUM_L2))
            if (levels, signs) not in seen:
                seen.add((levels, signs))
                profiles.append(ClassProfile(levels, signs))
                break
        else:  # pragma: no cover - profile space is astronomically larger
            raise CohortConfigError("could not draw distinct class profiles")
    return profiles


def profile_targets(profile: ClassProfile) -> tuple[np.ndarray, np.ndarray]:
    onehot = np.zeros(L1_TARGET_DIM, dtype=np.float64)
    for k, level in enumerate(profile.l1_levels):
        onehot[L1_OFFSETS[k] + level] = 1.0
    return onehot, np.array(profile.l2_signs, dtype=np.float64)


def _synthesize_sample(cfg: CohortConfig, profile: ClassProfile,
                       w_patch: np.ndarray, w_node: np.ndarray,
                       w_patch_d: np.ndarray | None, w_node_d: np.ndarray | None,
                       rng: np.random.Generator) -> tuple[np.ndarray, Graph]:
    # each modality sees the shared class latent through its own noise draw,
    # so modalities carry redundant (shared) plus modality-unique components
    latent = profile.latent()
    noisy_p = latent + cfg.concept_noise * rng.normal(size=latent.shape)
    noisy_g = latent + cfg.concept_noise * rng.normal(size=latent.shape)
    u_spread, u_edge = latent[1], latent[2]
    spread = 0.3 + 0.7 * max(0.0, u_spread + cfg.concept_noise * rng.normal())

    n_patches = int(rng.integers(cfg.patches_per_slide_range[0],
                                 cfg.patches_per_slide_range[1] + 1))
    base_p = w_patch @ noisy_p + 1.5 * noisy_p[0]
    if w_patch_d is not None:
        base_p = base_p + w_patch_d @ (cfg.distractor_scale
                                       * rng.normal(size=cfg.distractor_dim))
    patches = base_p[None, :] + spread * rng.normal(size=(n_patches, cfg.patch_dim))

    n_nodes = int(rng.integers(cfg.graph_nodes_range[0],
                               cfg.graph_nodes_range[1] + 1))
    base_n = w_node @ noisy_g + 1.5 * noisy_g[0]
    if w_node_d is not None:
        base_n = base_n + w_node_d @ (cfg.distractor_scale
                                      * rng.normal(size=cfg.distractor_dim))
    nodes = base_n[None, :] + spread * rng.normal(size=(n_nodes, cfg.graph_node_dim))

    p_edge = float(np.clip(cfg.edge_probability * (0.6 + 0.8 * u_edge), 0.02, 0.98))
    edges = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)
             if rng.random() < p_edge]
    return patches, Graph(nodes=nodes, edges=edges)


def generate_cohort(cfg: CohortConfig) -> list[CohortSample]:
    """Deterministic synthetic cohort; identical (cfg, seed) -> identical data."""
    cfg.validate()
    profiles = class_profiles(cfg)
    proj_rng = substream(cfg.seed, "cohort", "proj")
    w_patch = proj_rng.normal(size=(cfg.patch_dim, NUM_L1 + NUM_L2)) / np.sqrt(10.0)
    w_node = proj_rng.normal(size=(cfg.graph_node_dim, NUM_L1 + NUM_L2)) / np.sqrt(10.0)
    w_patch_d = w_node_d = None
    if cfg.distractor_dim > 0:
        scale = np.sqrt(cfg.distractor_dim)
        w_patch_d = proj_rng.normal(size=(cfg.patch_dim, cfg.distractor_dim)) / scale
        w_node_d = proj_rng.normal(size=(cfg.graph_node_dim, cfg.distractor_dim)) / scale

    label_rng = substream(cfg.seed, "cohort", "labels")
    if cfg.class_balance == "uniform":
        pool = np.array([p % cfg.num_classes for p in range(cfg.num_patients)])
    else:
        shares = 0.55 ** np.arange(cfg.num_classes)
        counts = np.maximum(1, np.floor(cfg.num_patients * shares / shares.sum()))
        counts = counts.astype(int)
        # distribute the rounding remainder to the most common classes first
        i = 0
        while counts.sum() < cfg.num_patients:
            counts[i % cfg.num_classes] += 1
            i += 1
        while counts.sum() > cfg.num_patients:
            biggest = int(np.argmax(counts))
            counts[biggest] -= 1
        pool = np.concatenate([np.full(c, cls) for cls, c in enumerate(counts)])
    labels = label_rng.permutation(pool)

    samples: list[CohortSample] = []
    for p in range(cfg.num_patients):
        label = int(labels[p])
        profile = profiles[label]
        l1_onehot, l2_binary = profile_targets(profile)
        for s in range(cfg.slides_per_patient):
            rng = substream(cfg.seed, "cohort", "sample", p, s)
            patches, graph = _synthesize_sample(cfg, profile, w_patch, w_node,
                                                w_patch_d, w_node_d, rng)
            l1_mask = (rng.random(NUM_L1) >= cfg.mask_rate_l1).astype(np.float64)
            l2_mask = (rng.random(NUM_L2) >= cfg.mask_rate_l2).astype(np.float64)
            samples.append(CohortSample(
                patient_id=f"P{p:04d}",
                sample_id=f"P{p:04d}-S{s:02d}",
                patches=patches,
                graph=graph,
                concept_targets=ConceptTargets(
                    l1_onehot=l1_onehot.copy(),
                    l1_mask=l1_mask,
                    l2_binary=l2_binary.copy(),
                    l2_mask=l2_mask,
                ),
                label=label,
            ))
    return samples


def split_patient_level(cohort: Sequence[CohortSample], folds: int, seed: int
                        ) -> list[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]]:
    """Cross-validation folds over patients: (train_ids, val_ids, test_ids).

    Fold i uses partition i as test and partition (i+1) mod folds as
    validation; a patient never appears in two roles within a fold.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if not cohort:
        raise ValueError("cohort is empty")
    patients = sorted({s.patient_id for s in cohort})
    if len(patients) < folds:
        raise ValueError(f"{len(patients)} patients cannot fill {folds} folds")
    rng = substream(seed, "splits")
    order = [patients[i] for i in rng.permutation(len(patients))]
    parts = [tuple(order[i::folds]) for i in range(folds)]
    out = []
    for i in range(folds):
        test = parts[i]
        val = parts[(i + 1) % folds]
        train = tuple(pid for j, part in enumerate(parts)
                      if j not in (i, (i + 1) % folds) for pid in part)
        out.append((train, val, test))
    return out


def samples_for_patients(cohort: Sequence[CohortSample],
                         patient_ids: Sequence[str]) -> list[CohortSample]:
    wanted = set(patient_ids)
    return [s for s in cohort if s.patient_id in wanted]


# JSON layout ---------------------------------------------------------------
#
# {"format": "cbmoe-cohort-v1",
#  "config": {...CohortConfig fields...},
#  "samples": [{"patient_id": str, "sample_id": str, "label": int,
#               "patches": [[float,...],...],
#               "graph": {"nodes": [[float,...],...], "edges": [[i,j],...]},
#               "concepts": {"l1_onehot": [int x19], "l1_mask": [int x5],
#                             "l2_binary": [int x5], "l2_mask": [int x5]}}]}

COHORT_FORMAT = "cbmoe-cohort-v1"


def cohort_to_json(cfg: CohortConfig, cohort: Sequence[CohortSample]) -> str:
    payload = {
        "format": COHORT_FORMAT,
        "config": asdict(cfg),
        "samples": [
            {
                "patient_id": s.patient_id,
                "sample_id": s.sample_id,
                "label": s.label,
                "patches": s.patches.tolist(),
                "graph": {
                    "nodes": s.graph.nodes.tolist(),
                    "edges": [list(e) for e in s.graph.edges],
                },
                "concepts": {
                    "l1_onehot": [int(v) for v in s.concept_targets.l1_onehot],
                    "l1_mask": [int(v) for v in s.concept_targets.l1_mask],
                    "l2_binary": [int(v) for v in s.concept_targets.l2_binary],
                    "l2_mask": [int(v) for v in s.concept_targets.l2_mask],
                },
            }
            for s in cohort
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=1)


def cohort_from_json(text: str) -> tuple[CohortConfig, list[CohortSample]]:
    payload = json.loads(text)
    if payload.get("format") != COHORT_FORMAT:
        raise ValueError(f"unrecognized cohort format: {payload.get('format')!r}")
    raw_cfg = dict(payload["config"])
    raw_cfg["patches_per_slide_range"] = tuple(raw_cfg["patches_per_slide_range"])
    raw_cfg["graph_nodes_range"] = tuple(raw_cfg["graph_nodes_range"])
    cfg = CohortConfig(**raw_cfg)
    samples = []
    for rec in payload["samples"]:
        c = rec["concepts"]
        samples.append(CohortSample(
            patient_id=rec["patient_id"],
            sample_id=rec["sample_id"],
            patches=np.asarray(rec["patches"], dtype=np.float64),
            graph=Graph(
                nodes=np.asarray(rec["graph"]["nodes"], dtype=np.float64),
                edges=[(int(i), int(j)) for i, j in rec["graph"]["edges"]],
            ),
            concept_targets=ConceptTargets(
                l1_onehot=np.asarray(c["l1_onehot"], dtype=np.float64),
                l1_mask=np.asarray(c["l1_mask"], dtype=np.float64),
                l2_binary=np.asarray(c["l2_binary"], dtype=np.float64),
                l2_mask=np.asarray(c["l2_mask"], dtype=np.float64),
            ),
            label=int(rec["label"]),
        ))
    return cfg, samples


def classify_by_profile(cohort: Sequence[CohortSample], cfg: CohortConfig) -> np.ndarray:
    """Nearest-profile decision rule over true concept targets (oracle check)."""
    profiles = class_profiles(cfg)
    keys = {}
    for c, prof in enumerate(profiles):
        onehot, l2 = profile_targets(prof)
        keys[tuple(np.concatenate([onehot, l2]).tolist())] = c
    preds = []
    for s in cohort:
        key = tuple(np.concatenate([s.concept_targets.l1_onehot,
                                    s.concept_targets.l2_binary]).tolist())
        preds.append(keys.get(key, -1))
    return np.asarray(preds)
