import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cbmoe.autodiff as ad
from cbmoe.autodiff import Tensor
from cbmoe.concepts import (ModelVariant, VariantError, apply_linear_head,
                            build_head_input, concept_activation,
                            concept_embed, concept_level_forward,
                            concept_states, expert_head, fuse_predict, gate,
                            head_input_dim, level2_input, parse_variant,
                            representation_chain)
from cbmoe.model import ConceptMoEModel, ModelDims
from cbmoe.synthcohort import CohortConfig, generate_cohort


def affine(shape, value=None, seed=0):
    rng = np.random.default_rng(seed)
    W = Tensor(rng.normal(size=shape) * 0.5 if value is None
               else np.full(shape, value), requires_grad=True)
    b = Tensor(np.zeros(shape[0]), requires_grad=True)
    return W, b


# variants -------------------------------------------------------------------

def test_variant_parsing_axes():
    v = parse_variant("hier-morph+bio")
    assert v.hierarchy == "hier" and v.levels == "morph+bio"
    assert v.residual == "soft" and v.bottleneck == "cem"
    assert v.bottleneck_kind == "cem_soft" and v.gamma_res == 1.0
    v = parse_variant("flat-morph-hard")
    assert v.bottleneck_kind == "cem_hard" and v.gamma_res == 0.0
    v = parse_variant("flat-bio-cbm")
    assert v.bottleneck_kind == "cbm_scalar" and v.gamma_res == 0.0
    v = parse_variant("hier-morph+bio-hard-cem")
    assert v.name() == "hier-morph+bio-hard-cem"


def test_variant_validation():
    with pytest.raises(VariantError):
        parse_variant("hier-morph")       # hier needs both levels
    with pytest.raises(VariantError):
        parse_variant("flat-everything")
    with pytest.raises(VariantError):
        parse_variant("flat-morph-fancy")


# single-concept ops ------------------------------------------------------------

def test_concept_states_zero_params_give_zero():
    z = Tensor(np.ones((2, 4)))
    pos = affine((3, 4), value=0.0)
    neg = affine((3, 4), value=0.0)
    c_pos, c_neg = concept_states(z, pos, neg)
    assert np.allclose(c_pos.data, 0.0) and np.allclose(c_neg.data, 0.0)


def test_concept_states_hand_oracle():
    # 2->2 affine on input (1, -1); LeakyReLU slope 0.01
    W = np.array([[1.0, 2.0], [0.5, -0.5]])
    b = np.array([0.1, -0.2])
    x = np.array([1.0, -1.0])
    pre = W @ x + b
    expect = np.where(pre >= 0, pre, 0.01 * pre)
    z = Tensor(x[None, :])
    pos = (Tensor(W, requires_grad=True), Tensor(b, requires_grad=True))
    c_pos, _ = concept_states(z, pos, pos)
    assert np.allclose(c_pos.data[0], expect, atol=1e-14)


def test_concept_state_dim_is_16_under_defaults():
    z = Tensor(np.zeros((1, 256)))
    pos = affine((16, 256), seed=1)
    neg = affine((16, 256), seed=2)
    c_pos, c_neg = concept_states(z, pos, neg)
    assert c_pos.shape == (1, 16) and c_neg.shape == (1, 16)


def test_concept_states_dim_mismatch():
    z = Tensor(np.zeros((1, 5)))
    with pytest.raises(ValueError):
        concept_states(z, affine((3, 4)), affine((3, 4)))


def test_concept_activation_cases():
    c_pos = Tensor(np.zeros((1, 3)))
    c_neg = Tensor(np.zeros((1, 3)))
    scorer = affine((1, 6), value=0.0)
    p = concept_activation(c_pos, c_neg, scorer)
    assert p.data[0, 0] == 0.5  # sigmoid(0)
    scorer[1].data[:] = 40.0    # large bias saturates
    p = concept_activation(c_pos, c_neg, scorer)
    assert p.data[0, 0] >= 1.0 - 1e-12


def test_concept_activation_sum_oracle():
    rng = np.random.default_rng(4)
    c_pos = Tensor(rng.normal(size=(1, 3)))
    c_neg = Tensor(rng.normal(size=(1, 3)))
    scorer = affine((1, 6), value=1.0)
    p = concept_activation(c_pos, c_neg, scorer)
    total = float(c_pos.data.sum() + c_neg.data.sum())
    assert math.isclose(float(p.data[0, 0]), 1 / (1 + math.exp(-total)),
                        rel_tol=1e-12)


def test_concept_embed_endpoints_and_mix():
    rng = np.random.default_rng(5)
    c_pos = Tensor(rng.normal(size=(1, 4)))
    c_neg = Tensor(rng.normal(size=(1, 4)))
    z = Tensor(rng.normal(size=(1, 6)))
    res = affine((4, 6), seed=6)
    one = Tensor(np.ones((1, 1)))
    zero = Tensor(np.zeros((1, 1)))
    assert np.array_equal(concept_embed(c_pos, c_neg, one, z, res, 0.0).data,
                          c_pos.data)
    assert np.array_equal(concept_embed(c_pos, c_neg, zero, z, res, 0.0).data,
                          c_neg.data)
    p = Tensor(np.full((1, 1), 0.25))
    got = concept_embed(c_pos, c_neg, p, z, res, 1.0)
    expect = (0.25 * c_pos.data + 0.75 * c_neg.data
              + z.data @ res[0].data.T + res[1].data)
    assert np.allclose(got.data, expect, atol=1e-13)


def test_level2_input_dims_and_slices():
    z = Tensor(np.arange(6.0).reshape(1, 6))
    B1 = Tensor(np.arange(100.0, 108.0).reshape(1, 8))
    x2 = level2_input(z, B1)
    assert x2.shape == (1, 14)
    assert np.array_equal(x2.data[0, :6], z.data[0])
    assert np.array_equal(x2.data[0, 6:], B1.data[0])
    # default dims: 256 + 5*16 = 336
    x2 = level2_input(Tensor(np.zeros((1, 256))), Tensor(np.zeros((1, 80))))
    assert x2.shape == (1, 336)
    zero_b = level2_input(Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 3))))
    assert np.allclose(zero_b.data[0, 4:], 0.0)


def test_head_zero_weights_give_bias_and_dims():
    head_W = Tensor(np.zeros((4, 80)), requires_grad=True)
    head_b = Tensor(np.array([0.5, -1.0, 0.0, 2.0]), requires_grad=True)
    out = expert_head(head_W, head_b, Tensor(np.ones((3, 80))))
    assert np.allclose(out.data, [[0.5, -1.0, 0.0, 2.0]] * 3)
    # flat(morph) head input dim is 5*16 = 80
    assert head_input_dim(parse_variant("flat-morph"), 5, 5, 16) == 80
    assert head_input_dim(parse_variant("hier-morph+bio"), 5, 5, 16) == 160
    assert head_input_dim(parse_variant("flat-morph-cbm"), 5, 5, 16) == 19
    assert head_input_dim(parse_variant("flat-bio-cbm"), 5, 5, 16) == 10
    assert head_input_dim(parse_variant("flat-morph+bio-cbm"), 5, 5, 16) == 29


def test_head_hand_matrix_oracle():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    x = rng.normal(size=(2, 5))
    out = expert_head(Tensor(W), Tensor(b), Tensor(x))
    assert np.allclose(out.data, x @ W.T + b, atol=1e-13)


def test_head_dim_mismatch():
    with pytest.raises(ValueError):
        expert_head(Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)),
                    Tensor(np.zeros((1, 4))))


def test_gate_uniform_for_zero_params():
    e = Tensor(np.random.default_rng(8).normal(size=(3, 4)))
    W = Tensor(np.zeros((4, 8)))
    b = Tensor(np.zeros(4))
    alpha = gate(e, e, W, b)
    assert np.allclose(alpha.data, 0.25, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_gate_weights_form_distribution(seed):
    rng = np.random.default_rng(seed)
    e1 = Tensor(rng.normal(size=(4, 3)) * 5)
    e2 = Tensor(rng.normal(size=(4, 3)) * 5)
    W = Tensor(rng.normal(size=(4, 6)))
    b = Tensor(rng.normal(size=4))
    alpha = gate(e1, e2, W, b).data
    assert np.all(alpha >= 0)
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-9)


def test_gate_softmax_oracle():
    # softmax oracle for logits (1,0,0,0)
    exps = [math.exp(1.0), 1.0, 1.0, 1.0]
    total = sum(exps)
    expect = [v / total for v in exps]
    assert math.isclose(expect[0], 0.4755, abs_tol=2e-4)
    e1 = Tensor(np.ones((1, 1)))
    e2 = Tensor(np.zeros((1, 1)))
    W = Tensor(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]))
    b = Tensor(np.zeros(4))
    alpha = gate(e1, e2, W, b)
    assert np.allclose(alpha.data[0], expect, atol=1e-12)


def test_fuse_predict_cases():
    rng = np.random.default_rng(9)
    logits = [Tensor(rng.normal(size=(2, 3))) for _ in range(4)]
    one_hot = Tensor(np.array([[0.0, 0.0, 1.0, 0.0]] * 2))
    assert np.allclose(fuse_predict(one_hot, logits).data, logits[2].data)
    uniform = Tensor(np.full((2, 4), 0.25))
    mean = np.mean([l.data for l in logits], axis=0)
    assert np.allclose(fuse_predict(uniform, logits).data, mean, atol=1e-13)
    alpha = Tensor(np.array([[0.1, 0.2, 0.3, 0.4]] * 2))
    expect = sum(w * l.data for w, l in zip([0.1, 0.2, 0.3, 0.4], logits))
    assert np.allclose(fuse_predict(alpha, logits).data, expect, atol=1e-13)


# grouped forward vs single-concept composition -----------------------------------

def test_grouped_level_matches_single_concept_ops():
    rng = np.random.default_rng(10)
    d_in, d_c, k, n = 5, 3, 4, 2
    x = Tensor(rng.normal(size=(n, d_in)))
    from cbmoe.concepts import ConceptLevelParams
    params = ConceptLevelParams(
        pos_W=Tensor(rng.normal(size=(k, d_c, d_in))),
        pos_b=Tensor(rng.normal(size=(k, d_c))),
        neg_W=Tensor(rng.normal(size=(k, d_c, d_in))),
        neg_b=Tensor(rng.normal(size=(k, d_c))),
        res_W=Tensor(rng.normal(size=(k, d_c, d_in))),
        res_b=Tensor(rng.normal(size=(k, d_c))),
        mix_W=Tensor(rng.normal(size=(k, 1, 2 * d_c))),
        mix_b=Tensor(rng.normal(size=(k, 1))),
    )
    out = concept_level_forward(x, params, gamma_res=1.0, ordinal=False)
    for kk in range(k):
        pos = (Tensor(params.pos_W.data[kk]), Tensor(params.pos_b.data[kk]))
        neg = (Tensor(params.neg_W.data[kk]), Tensor(params.neg_b.data[kk]))
        c_pos, c_neg = concept_states(x, pos, neg)
        scorer = (Tensor(params.mix_W.data[kk]), Tensor(params.mix_b.data[kk]))
        p = concept_activation(c_pos, c_neg, scorer)
        res = (Tensor(params.res_W.data[kk]), Tensor(params.res_b.data[kk]))
        c_hat = concept_embed(c_pos, c_neg, p, x, res, 1.0)
        assert np.allclose(out.c_hat.data[:, kk, :], c_hat.data, atol=1e-12)
        assert np.allclose(out.p_mix.data[:, kk, 0], p.data[:, 0], atol=1e-12)


# representation chain (soft-bottleneck preservation) -------------------------------

def tiny_model(variant="hier-morph+bio", d=6, d_c=3, seed=0):
    dims = ModelDims(patch_dim=4, graph_node_dim=3, num_classes=3, d=d, d_c=d_c,
                     gnn_layers=1, gnn_hidden=4, gnn_dropout=0.0)
    return ConceptMoEModel(dims, parse_variant(variant)).init_params(seed=seed)


def tiny_cohort(n_patients=6, seed=3):
    cfg = CohortConfig(num_patients=n_patients, slides_per_patient=1,
                       num_classes=3, patch_dim=4, graph_node_dim=3,
                       patches_per_slide_range=(2, 4), graph_nodes_range=(2, 4),
                       seed=seed)
    return generate_cohort(cfg)


def test_chain_dims_under_defaults():
    # dimension arithmetic: d=256, K1*d_c = 80, residual stack 80, B2 80
    model = ConceptMoEModel(ModelDims(patch_dim=4, graph_node_dim=3),
                            parse_variant("hier-morph+bio")).init_params(seed=0)
    samples = tiny_cohort(3)
    out = model.forward(samples)
    r0, r1, r2 = representation_chain(out.bundles["r"], model.variant)
    assert r0.shape[1] == 256
    assert r1.shape[1] == 256 + 80 + 80
    assert r2.shape[1] == 416 + 80


def test_chain_prefix_property_and_head_transfer():
    model = tiny_model()
    samples = tiny_cohort()
    out = model.forward(samples)
    for eid in ("u1", "s"):
        r0, r1, r2 = representation_chain(out.bundles[eid], model.variant)
        assert np.array_equal(r1.data[:, :r0.shape[1]], r0.data)
        assert np.array_equal(r2.data[:, :r1.shape[1]], r1.data)
        # zero-padded head transfer is exact at machine precision
        rng = np.random.default_rng(11)
        W0 = rng.normal(size=(3, r0.shape[1]))
        b0 = rng.normal(size=3)
        base = apply_linear_head(r0.data, W0, b0)
        W1 = np.concatenate([W0, np.zeros((3, r1.shape[1] - r0.shape[1]))], axis=1)
        assert np.array_equal(apply_linear_head(r1.data, W1, b0), base)
        W2 = np.concatenate([W1, np.zeros((3, r2.shape[1] - r1.shape[1]))], axis=1)
        assert np.array_equal(apply_linear_head(r2.data, W2, b0), base)


def test_chain_rejected_for_hard_and_cbm():
    for variant in ("hier-morph+bio-hard", "hier-morph+bio-cbm"):
        model = tiny_model(variant)
        out = model.forward(tiny_cohort(3))
        with pytest.raises(VariantError):
            representation_chain(out.bundles["r"], model.variant)


def test_hard_bottleneck_blocks_residual_gradient():
    # zero the state/scorer paths: with gamma_res = 0 nothing reaches z
    for variant, expect_zero in (("flat-morph-hard", True), ("flat-morph", False)):
        model = tiny_model(variant)
        for eid in ("u1", "u2", "r", "s"):
            lvl = model.l1_params[eid]
            lvl.pos_W.data[:] = 0.0
            lvl.pos_b.data[:] = 0.0
            lvl.neg_W.data[:] = 0.0
            lvl.neg_b.data[:] = 0.0
        samples = tiny_cohort(3)
        out = model.forward(samples)
        ad.zero_grads(model.params)
        ad.sum_(ad.square(out.bundles["r"].l1.B)).backward()
        z_grad_sources = ["expert.r.W1", "expert.r.W2"]
        grads = [model.params[name].grad for name in z_grad_sources]
        if expect_zero:
            assert all(g is None or np.allclose(g, 0.0, atol=1e-18) for g in grads)
        else:
            assert any(g is not None and np.abs(g).sum() > 1e-8 for g in grads)


def test_cbm_head_sees_only_probabilities():
    model = tiny_model("hier-morph+bio-cbm")
    samples = tiny_cohort(3)
    out = model.forward(samples)
    bundle = out.bundles["u1"]
    assert bundle.head_input.shape[1] == 19 + 10
    # the L2 block must still consume [z; B1] per the hierarchy contract
    assert model.l2_params["u1"].pos_W.shape[2] == model.dims.d + 5 * model.dims.d_c
    # pair encoding: entries come in (p, 1-p) pairs
    pairs = bundle.head_input.data[:, 19:].reshape(len(samples), 5, 2)
    assert np.allclose(pairs.sum(axis=2), 1.0, atol=1e-12)


def test_all_activations_in_unit_interval():
    model = tiny_model()
    out = model.forward(tiny_cohort())
    for eid, bundle in out.bundles.items():
        for lvl in (bundle.l1, bundle.l2):
            assert np.all(lvl.p_mix.data > 0.0) and np.all(lvl.p_mix.data < 1.0)
            assert np.all(lvl.sup_probs.data > 0.0) and np.all(lvl.sup_probs.data < 1.0)
    assert np.allclose(out.alpha.data.sum(axis=1), 1.0, atol=1e-9)


def test_build_head_input_variants_cover_levels():
    model = tiny_model("flat-bio")
    out = model.forward(tiny_cohort(3))
    assert out.bundles["u1"].l1 is None
    assert out.bundles["u1"].head_input.shape[1] == 5 * model.dims.d_c
    model = tiny_model("flat-morph")
    out = model.forward(tiny_cohort(3))
    assert out.bundles["u1"].l2 is None
    assert out.bundles["u1"].head_input.shape[1] == 5 * model.dims.d_c
