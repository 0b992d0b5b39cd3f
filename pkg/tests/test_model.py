import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from airlabel.errors import NonFiniteActivation, ShapeMismatch
from airlabel.model import (
    BCE_EPS,
    LEVELS,
    AirwayLabeler,
    LossWeights,
    ModelConfig,
    compute_loss,
    prepare,
)
from airlabel.tree import BranchNode, build_tree

from conftest import gradcheck_module

SMALL = ModelConfig(d=8, heads=2, abs_hidden=8)


def six_node_tree(nom):
    rows = [
        (None, (0, 0, 0), (0, 0, -2), (0, 0, 0), False),
        (0, (0, 0, -2), (1, 0, -3), (1, 1, 1), False),
        (1, (1, 0, -3), (2, 0.5, -3.5), (1, 2, 2), False),
        (2, (2, 0.5, -3.5), (2.6, 1.2, -3.9), (1, 2, 4), False),
        (1, (1, 0, -3), (1.5, -1, -4), (1, 3, 3), False),
        (2, (2, 0.5, -3.5), (2.0, 0.3, -2.4), (2, 4, 8), True),
    ]
    nodes = [
        BranchNode(i, p, s, e, *lab, is_abnormal=ab) for i, (p, s, e, lab, ab) in enumerate(rows)
    ]
    return build_tree(nodes, nom)


@pytest.fixture
def tree(tiny_nom):
    return six_node_tree(tiny_nom)


def test_single_node_bundle_shapes(tiny_nom):
    t = build_tree([BranchNode(0, None, (0, 0, 0), (0, 0, -1), 0, 0, 0)], tiny_nom)
    model = AirwayLabeler(SMALL, tiny_nom)
    bundle = model(prepare(t))
    assert len(bundle.stages) == 2
    for st in bundle.stages:
        for m in LEVELS:
            assert st.logits[m].shape == (1, tiny_nom.n_classes(m))
        assert st.subtree.shape == (1, 1) and st.anomaly_mask.shape == (1, 1)
    assert all(len(bundle.labels[m]) == 1 for m in LEVELS)


def test_identical_rows_identical_stage1_lobar_logits(tiny_nom):
    model = AirwayLabeler(SMALL, tiny_nom)
    nodes = [BranchNode(0, None, (0, 0, 0), (0, 0, -1), 0, 0, 0)]
    nodes += [BranchNode(i, 0, (0, 0, -1), (0, 0, -2), 0, 0, 0) for i in (1, 2, 3)]
    t = build_tree(nodes, tiny_nom)
    z = model(prepare(t)).stages[0].logits["lob"]
    torch.testing.assert_close(z[1:], z[1].expand(3, -1), rtol=0, atol=1e-14)


def test_forward_deterministic(tree, tiny_nom):
    a = AirwayLabeler(SMALL, tiny_nom)(prepare(tree))
    b = AirwayLabeler(SMALL, tiny_nom)(prepare(tree))
    for sa, sb in zip(a.stages, b.stages):
        for m in LEVELS:
            assert torch.equal(sa.logits[m], sb.logits[m])
        assert torch.equal(sa.subtree, sb.subtree) and torch.equal(sa.anomaly, sb.anomaly)


def test_init_seed_does_not_touch_global_rng(tiny_nom):
    torch.manual_seed(5)
    before = torch.rand(3)
    torch.manual_seed(5)
    AirwayLabeler(SMALL, tiny_nom)
    assert torch.equal(torch.rand(3), before)


@pytest.mark.parametrize("name", ["baseline", "f2c", "f2c+ssc", "f2c+abs", "full"])
def test_variants_toggle_heads(name, tree, tiny_nom):
    cfg = SMALL.variant(name)
    bundle = AirwayLabeler(cfg, tiny_nom)(prepare(tree))
    assert len(bundle.stages) == cfg.n_stages
    st = bundle.final
    assert (st.subtree is not None) == cfg.use_ssc
    assert (st.anomaly is not None) == cfg.use_abs
    _, terms = compute_loss(bundle, prepare(tree))
    assert any("bce_subtree" in k for k in terms) == cfg.use_ssc
    assert any("bce_anomaly" in k for k in terms) == cfg.use_abs


def test_anomaly_threshold_overrides_labels(tree, tiny_nom):
    model = AirwayLabeler(replace(SMALL, anomaly_threshold=0.0), tiny_nom)
    bundle = model(prepare(tree))
    assert bundle.abnormal_pred.all()
    assert (bundle.labels["seg"] == tiny_nom.outlier_seg).all()
    model = AirwayLabeler(replace(SMALL, anomaly_threshold=1.0), tiny_nom)
    bundle = model(prepare(tree))
    assert not bundle.abnormal_pred.any()
    z = bundle.final.logits["sub"].argmax(1).numpy()
    assert np.array_equal(bundle.labels["sub"], z)


def test_shape_mismatch(tree, tiny_nom):
    model = AirwayLabeler(SMALL, tiny_nom)
    inp = prepare(tree)
    inp.features = inp.features[:, :5]
    with pytest.raises(ShapeMismatch):
        model(inp)


def test_non_finite_activation_names_block(tree, tiny_nom):
    model = AirwayLabeler(SMALL, tiny_nom)
    with torch.no_grad():
        model.stages[0].seg[0].ff2.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteActivation, match="s1.seg"):
        model(prepare(tree))


# -- loss -----------------------------------------------------------------------

def loss_oracle(bundle, tree, weights, eps):
    """Scalar re-implementation of the weighted multi-level objective."""
    nom = tree.nomenclature
    total = 0.0
    for i, st in enumerate(bundle.stages):
        stage = 0.0
        for m, a in zip(LEVELS, weights.level):
            z = st.logits[m].detach().numpy()
            y = tree.labels(m)
            c = nom.n_classes(m)
            losses = []
            for n in range(tree.N):
                if tree.nodes[n].is_abnormal:
                    continue
                mx = max(z[n])
                lse = mx + math.log(sum(math.exp(v - mx) for v in z[n]))
                logp = [v - lse for v in z[n]]
                losses.append(-((1 - eps) * logp[y[n]] + eps / c * sum(logp)))
            stage += a * (sum(losses) / len(losses) if losses else 0.0)

        def bce(p, t):
            p = min(max(p, BCE_EPS), 1 - BCE_EPS)
            return -(t * math.log(p) + (1 - t) * math.log(1 - p))

        if st.subtree is not None:
            r = st.subtree.detach().numpy()
            seg = tree.labels("seg")
            vals = [bce(r[a, b], 1.0 if seg[a] == seg[b] else 0.0) for a in range(tree.N) for b in range(tree.N)]
            stage += weights.subtree * sum(vals) / len(vals)
        if st.anomaly is not None:
            y = st.anomaly.detach().numpy()
            vals = [bce(y[n], 1.0 if tree.nodes[n].is_abnormal else 0.0) for n in range(tree.N)]
            stage += weights.anomaly * sum(vals) / len(vals)
        total += weights.stage[i] * stage
    return total


@pytest.mark.parametrize("seed", range(3))
def test_loss_matches_scalar_oracle(seed, tree, tiny_nom):
    model = AirwayLabeler(replace(SMALL, init_seed=seed), tiny_nom)
    inp = prepare(tree)
    bundle = model(inp)
    w = LossWeights(stage=(0.7, 1.3), level=(0.5, 1.0, 2.0), subtree=0.9, anomaly=1.1)
    total, _ = compute_loss(bundle, inp, w, label_smoothing=0.01)
    assert abs(total.item() - loss_oracle(bundle, tree, w, 0.01)) < 1e-10


def test_all_abnormal_tree_has_zero_ce(tiny_nom):
    nodes = [
        BranchNode(0, None, (0, 0, 0), (0, 0, -1), 2, 4, 8, True),
        BranchNode(1, 0, (0, 0, -1), (0, 1, -2), 2, 4, 8, True),
    ]
    t = build_tree(nodes, tiny_nom)
    inp = prepare(t)
    total, terms = compute_loss(AirwayLabeler(SMALL, tiny_nom)(inp), inp)
    assert all(v.item() == 0 for k, v in terms.items() if ".ce_" in k)
    assert torch.isfinite(total)
    total.backward()


def test_large_correct_logits_give_near_zero_ce(tree, tiny_nom):
    inp = prepare(tree)
    bundle = AirwayLabeler(SMALL.variant("baseline"), tiny_nom)(inp)
    for m in LEVELS:
        z = torch.full_like(bundle.stages[0].logits[m], -50.0)
        z[torch.arange(tree.N), inp.labels[m].clamp(max=z.shape[1] - 1)] = 50.0
        bundle.stages[0].logits[m] = z
    total, _ = compute_loss(bundle, inp, label_smoothing=0.0)
    assert total.item() < 1e-30


def test_exact_anomaly_scores_bound_bce(tree, tiny_nom):
    inp = prepare(tree)
    bundle = AirwayLabeler(SMALL, tiny_nom)(inp)
    for st in bundle.stages:
        st.anomaly = inp.abnormal.double()
    _, terms = compute_loss(bundle, inp)
    for k, v in terms.items():
        if "bce_anomaly" in k:
            assert v.item() <= -2 * math.log(1 - BCE_EPS)


def test_end_to_end_gradients(tree, tiny_nom):
    """Every parameter tensor (sampled entries) against central differences."""
    model = AirwayLabeler(replace(SMALL, init_seed=1), tiny_nom)
    with torch.no_grad():
        for p in model.parameters():
            if p.abs().max() == 0:  # codebooks and biases start at zero
                p.normal_(0, 0.1)
    inp = prepare(tree)
    tensors = dict(model.named_parameters())
    errs = gradcheck_module(lambda: compute_loss(model(inp), inp)[0], tensors, sample=6)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, (worst, errs[worst])
