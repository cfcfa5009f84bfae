"""Scikit-learn style front end.

`ConceptMoEClassifier` wraps cohort generation-agnostic training behind the
familiar fit/predict/predict_proba surface so the model drops into standard
tooling (clone, get_params grids, pipelines that pass opaque sample lists).
X is a sequence of `CohortSample`; y defaults to the labels stored on the
samples. Early stopping uses an internal patient-level validation split.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .concepts import parse_variant
from .model import ConceptMoEModel, ModelDims
from .objective import LossWeights
from .rng import substream
from .trainer import TrainConfig, evaluate, train_fold
from .validation import check_labels, check_samples


class ConceptMoEClassifier(BaseEstimator, ClassifierMixin):
    """Concept-bottleneck mixture-of-experts classifier.

    Parameters mirror the training recipe; feature dimensions are inferred
    from the data at fit time. `val_fraction` of patients (at least one) is
    held out for early stopping on validation macro-F1.
    """

    def __init__(self, variant: str = "hier-morph+bio", d: int = 64,
                 d_c: int = 16, gnn_layers: int = 2, gnn_hidden: int = 64,
                 gnn_dropout: float = 0.1, patch_cap: int = 16,
                 lambda1: float = 0.5, lambda2: float = 0.3,
                 lambda_int: float = 0.1, perturb_sigma_scale: float = 1.0,
                 lr: float = 2e-4, batch_size: int = 16, max_epochs: int = 150,
                 patience: int = 30, dropout: float = 0.1,
                 val_fraction: float = 0.2, seed: int = 0):
        self.variant = variant
        self.d = d
        self.d_c = d_c
        self.gnn_layers = gnn_layers
        self.gnn_hidden = gnn_hidden
        self.gnn_dropout = gnn_dropout
        self.patch_cap = patch_cap
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda_int = lambda_int
        self.perturb_sigma_scale = perturb_sigma_scale
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout = dropout
        self.val_fraction = val_fraction
        self.seed = seed

    def _split_for_validation(self, X, y):
        patients = sorted({s.patient_id for s in X})
        rng = substream(self.seed, "estimator", "valsplit")
        order = [patients[i] for i in rng.permutation(len(patients))]
        n_val = max(1, int(round(self.val_fraction * len(order))))
        if n_val >= len(order):
            raise ValueError("too few patients to hold out a validation split")
        val_ids = set(order[:n_val])
        train, val = [], []
        for s, label in zip(X, y):
            (val if s.patient_id in val_ids else train).append((s, label))
        return [s for s, _ in train], [s for s, _ in val]

    def fit(self, X, y=None):
        patch_dim, node_dim, n_from_labels = check_samples(X)
        y = check_labels(X, y)
        if not np.array_equal(y, [s.label for s in X]):
            raise ValueError("y must match the labels stored on the samples")
        self.classes_ = np.unique(y)
        num_classes = int(max(n_from_labels, len(self.classes_),
                              self.classes_.max() + 1))
        dims = ModelDims(patch_dim=patch_dim, graph_node_dim=node_dim,
                         num_classes=num_classes, d=self.d, d_c=self.d_c,
                         gnn_layers=self.gnn_layers, gnn_hidden=self.gnn_hidden,
                         gnn_dropout=self.gnn_dropout, patch_cap=self.patch_cap)
        model = ConceptMoEModel(dims, parse_variant(self.variant),
                                perturb_sigma_scale=self.perturb_sigma_scale)
        model.init_params(seed=self.seed)
        train_s, val_s = self._split_for_validation(X, y)
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size,
                          max_epochs=self.max_epochs, patience=self.patience,
                          dropout=self.dropout)
        weights = LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                              lambda_int=self.lambda_int)
        result = train_fold(model, train_s, val_s, None, cfg, weights,
                            seed=self.seed, probe=False, evaluate_test=False)
        self.model_ = model
        self.train_result_ = result
        self.n_features_in_ = (patch_dim, node_dim)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit must be called before prediction")

    def decision_function(self, X):
        self._check_fitted()
        check_samples(X)
        with ad.no_grad():
            out = self.model_.forward(list(X), training=False)
        return out.fused_logits.data.copy()

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def evaluate(self, X):
        """Full evaluation report (macro-F1, per-class scores, concept AUROCs)."""
        self._check_fitted()
        return evaluate(self.model_, list(X))
