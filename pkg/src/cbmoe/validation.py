"""Input validation helpers for the estimator-facing API."""
from __future__ import annotations

import numpy as np

from .synthcohort import (L1_TARGET_DIM, NUM_L1, NUM_L2, CohortSample)


def check_samples(X) -> tuple[int, int, int]:
    """Validate a sequence of cohort samples; returns (patch_dim, node_dim,
    implied class count from the max label)."""
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError("X must be a nonempty sequence of CohortSample")
    patch_dim = node_dim = None
    max_label = 0
    for i, s in enumerate(X):
        if not isinstance(s, CohortSample):
            raise TypeError(f"X[{i}] is not a CohortSample")
        p = np.asarray(s.patches)
        g = np.asarray(s.graph.nodes)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError(f"X[{i}] needs a nonempty (n, patch_dim) patch bag")
        if g.ndim != 2 or g.shape[0] < 1:
            raise ValueError(f"X[{i}] needs a nonempty node feature matrix")
        if patch_dim is None:
            patch_dim, node_dim = p.shape[1], g.shape[1]
        elif p.shape[1] != patch_dim or g.shape[1] != node_dim:
            raise ValueError(f"X[{i}] has inconsistent feature dimensions")
        n = g.shape[0]
        for a, b in s.graph.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ValueError(f"X[{i}] has an invalid edge ({a}, {b})")
        t = s.concept_targets
        if (len(t.l1_onehot) != L1_TARGET_DIM or len(t.l1_mask) != NUM_L1
                or len(t.l2_binary) != NUM_L2 or len(t.l2_mask) != NUM_L2):
            raise ValueError(f"X[{i}] has a malformed concept-target layout")
        max_label = max(max_label, int(s.label))
    return patch_dim, node_dim, max_label + 1


def check_labels(X, y) -> np.ndarray:
    """Resolve labels: taken from the samples when y is None."""
    if y is None:
        return np.array([int(s.label) for s in X])
    y = np.asarray(y, dtype=np.intp)
    if y.shape != (len(X),):
        raise ValueError("y must have one label per sample")
    if np.any(y < 0):
        raise ValueError("labels must be nonnegative")
    return y
