import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cbmoe.estimator import ConceptMoEClassifier
from cbmoe.synthcohort import CohortConfig, generate_cohort


def make_cohort(n=24, seed=17):
    cfg = CohortConfig(num_patients=n, slides_per_patient=1, num_classes=3,
                       patch_dim=5, graph_node_dim=4,
                       patches_per_slide_range=(3, 5), graph_nodes_range=(3, 5),
                       concept_noise=0.1, seed=seed)
    return generate_cohort(cfg)


def small_clf(**overrides):
    params = dict(variant="hier-morph+bio", d=8, d_c=3, gnn_layers=1,
                  gnn_hidden=8, gnn_dropout=0.0, lr=2e-3, batch_size=8,
                  max_epochs=6, patience=6, dropout=0.0, lambda_int=0.0,
                  seed=0)
    params.update(overrides)
    return ConceptMoEClassifier(**params)


def test_get_params_set_params_clone():
    clf = small_clf()
    params = clf.get_params()
    assert params["variant"] == "hier-morph+bio"
    assert params["d"] == 8
    clf.set_params(d=16, lambda1=0.9)
    assert clf.d == 16 and clf.lambda1 == 0.9
    cloned = clone(clf)
    assert cloned.get_params() == clf.get_params()


def test_predict_before_fit_raises():
    with pytest.raises(NotFittedError):
        small_clf().predict(make_cohort(4))


def test_fit_predict_interface():
    cohort = make_cohort()
    clf = small_clf().fit(cohort)
    preds = clf.predict(cohort)
    assert preds.shape == (len(cohort),)
    assert set(preds.tolist()) <= {0, 1, 2}
    proba = clf.predict_proba(cohort)
    assert proba.shape == (len(cohort), 3)
    assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    acc = clf.score(cohort, [s.label for s in cohort])
    assert 0.0 <= acc <= 1.0
    assert np.array_equal(clf.classes_, [0, 1, 2])


def test_fit_learns_separable_cohort():
    cfg = CohortConfig(num_patients=30, slides_per_patient=1, num_classes=3,
                       patch_dim=5, graph_node_dim=4,
                       patches_per_slide_range=(3, 5), graph_nodes_range=(3, 5),
                       concept_noise=0.05, seed=17)
    cohort = generate_cohort(cfg)
    clf = small_clf(d=12, gnn_hidden=12, lr=3e-3, max_epochs=40,
                    patience=40).fit(cohort)
    train_acc = clf.score(cohort, [s.label for s in cohort])
    assert train_acc >= 0.9


def test_fit_rejects_mismatched_labels():
    cohort = make_cohort(8)
    wrong = [(s.label + 1) % 3 for s in cohort]
    with pytest.raises(ValueError):
        small_clf().fit(cohort, wrong)


def test_fit_rejects_malformed_inputs():
    with pytest.raises(ValueError):
        small_clf().fit([])
    cohort = make_cohort(8)
    cohort[3].patches = cohort[3].patches[:, :3]  # inconsistent dimension
    with pytest.raises(ValueError):
        small_clf().fit(cohort)


def test_fit_is_deterministic():
    cohort = make_cohort()
    a = small_clf().fit(cohort)
    b = small_clf().fit(cohort)
    assert np.array_equal(a.decision_function(cohort), b.decision_function(cohort))


def test_evaluate_report():
    cohort = make_cohort()
    clf = small_clf().fit(cohort)
    report = clf.evaluate(cohort)
    assert 0.0 <= report.macro_f1 <= 1.0
    assert set(report.concept_aurocs) == {"u1", "u2", "r", "s"}
