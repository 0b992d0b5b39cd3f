import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import precision_recall_fscore_support

from airlabel.metrics import (
    accuracy,
    anomaly_pr,
    confusion_matrix,
    consistency,
    consistency_all,
    evaluate_predictions,
    macro_prf,
)
from airlabel.synth import GenConfig, generate_deformed_tree, generate_tree
from airlabel.tree import build_tree

from conftest import chain, random_tree


def test_accuracy_cases():
    gt = np.arange(10) % 3
    assert accuracy(gt, gt) == 1.0
    assert accuracy((gt + 1) % 3, gt) == 0.0
    pred = gt.copy()
    pred[[1, 4, 8]] = (pred[[1, 4, 8]] + 1) % 3
    assert accuracy(pred, gt) == 0.7


def test_accuracy_excludes_abnormal():
    gt = np.array([0, 1, 2, 3])
    pred = np.array([0, 1, 0, 0])
    abnormal = np.array([False, False, True, True])
    assert accuracy(pred, gt, exclude_abnormal=True, abnormal=abnormal) == 1.0
    with pytest.raises(ValueError):
        accuracy(pred, gt, exclude_abnormal=True)


def brute_prf(pred, gt):
    classes = sorted(set(gt.tolist()))
    ps, rs, fs = [], [], []
    for c in classes:
        tp = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        npred = sum(1 for p in pred if p == c)
        ntrue = sum(1 for g in gt if g == c)
        p = tp / npred if npred else 0.0
        r = tp / ntrue
        ps.append(p)
        rs.append(r)
        fs.append(2 * p * r / (p + r) if p + r else 0.0)
    return np.mean(ps), np.mean(rs), np.mean(fs)


def test_prf_trivial():
    gt = np.array([0, 1, 2, 2])
    assert macro_prf(gt, gt, 3) == (1.0, 1.0, 1.0)
    assert macro_prf(np.ones(4, int), np.zeros(4, int), 3) == (0.0, 0.0, 0.0)


def test_prf_three_class_hand_case():
    # confusion (rows gt, cols pred): [[3,1,0],[0,2,2],[1,0,1]]
    gt = np.array([0] * 4 + [1] * 4 + [2] * 2)
    pred = np.array([0, 0, 0, 1, 1, 1, 2, 2, 0, 2])
    cm = confusion_matrix(pred, gt, 3)
    assert cm[:3, :3].tolist() == [[3, 1, 0], [0, 2, 2], [1, 0, 1]]
    p = (3 / 4 + 2 / 3 + 1 / 3) / 3
    r = (3 / 4 + 2 / 4 + 1 / 2) / 3
    f = (2 * .75 * .75 / 1.5 + 2 * (2 / 3) * .5 / (2 / 3 + .5) + 2 * (1 / 3) * .5 / (1 / 3 + .5)) / 3
    np.testing.assert_allclose(macro_prf(pred, gt, 3), (p, r, f), rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10), st.integers(1, 50), st.integers(0, 2**31 - 1))
def test_prf_matches_brute_force_and_sklearn(c, n, seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, c, n)
    pred = rng.integers(0, c + 1, n)  # outlier id may be predicted
    got = macro_prf(pred, gt, c)
    np.testing.assert_allclose(got, brute_prf(pred, gt), atol=1e-12)
    labels = sorted(set(gt.tolist()))
    ref = precision_recall_fscore_support(gt, pred, labels=labels, average=None, zero_division=0)
    np.testing.assert_allclose(got, [ref[0].mean(), ref[1].mean(), ref[2].mean()], atol=1e-12)


# -- consistency ---------------------------------------------------------------

def cs_chain(tiny_nom):
    # trunk -> lobe stem -> segment 2 -> 2 -> 2
    labels = [(0, 0, 0), (1, 1, 1), (1, 2, 2), (1, 2, 4), (1, 2, 5)]
    return build_tree(chain(5, labels), tiny_nom)


def test_consistency_hand_example(tiny_nom):
    t = cs_chain(tiny_nom)
    assert consistency(t.labels("seg"), t) == 1.0
    pred = np.array([0, 1, 2, 2, 3])  # leaf flipped to the sibling segment
    # eligible: nodes 2, 3, 4; only the leaf keeps a uniform subtree
    assert consistency(pred, t) == pytest.approx(1 / 3, abs=1e-15)
    assert consistency_all(pred, t) == pytest.approx(1 / 5, abs=1e-15)


def test_consistency_ignores_predicted_outliers(tiny_nom):
    t = cs_chain(tiny_nom)
    assert consistency(np.array([0, 1, 2, 2, tiny_nom.outlier_seg]), t) == 1.0


def test_consistency_vacuous(tiny_nom):
    t = cs_chain(tiny_nom)
    assert consistency(np.zeros(5, int), t) == 1.0


def test_consistency_on_generator_ground_truth():
    cfg = GenConfig(anomaly_rate=0.2, atrophy_rate=0.3, distortion_angle_deg=10)
    for i in range(20):
        t = generate_deformed_tree(cfg, i)
        assert consistency(t.labels("seg"), t) == 1.0


def test_single_relabel_is_not_monotone(tiny_nom):
    # relabeling one mismatching descendant can break a node below the ancestor,
    # which is why the monotonicity property is stated for whole-subtree correction
    t = build_tree(chain(3, [(1, 2, 2), (1, 3, 3), (1, 3, 6)]), tiny_nom)
    assert consistency(np.array([2, 3, 3]), t) == pytest.approx(2 / 3)
    assert consistency(np.array([2, 3, 2]), t) == pytest.approx(1 / 3)


@pytest.mark.parametrize("seed", range(40))
def test_consistency_monotone_under_subtree_correction(seed, tiny_nom):
    rng = np.random.default_rng(seed)
    t = random_tree(rng, int(rng.integers(2, 40)), tiny_nom)
    pred = rng.integers(0, tiny_nom.n_seg + 1, t.N)
    before = consistency(pred, t)
    proper = set(tiny_nom.proper_segment_ids)
    for i in rng.permutation(t.N):
        sub = t.subtree(int(i))
        if pred[i] in proper and len(set(pred[sub].tolist())) > 1:
            fixed = pred.copy()
            fixed[sub] = pred[i]
            assert consistency(fixed, t) >= before
            break


def test_anomaly_pr():
    assert anomaly_pr([1, 1, 0, 0], [1, 0, 1, 0]) == (0.5, 0.5)
    p, r = anomaly_pr([0, 0], [0, 1])
    assert np.isnan(p) and r == 0.0


def test_evaluate_predictions_on_ground_truth():
    cfg = GenConfig(anomaly_rate=0.3, atrophy_rate=0.3)
    trees = [generate_deformed_tree(cfg, i) for i in range(4)]
    preds = [{**{m: t.labels(m) for m in ("lob", "seg", "sub")}, "is_abnormal_pred": t.abnormal} for t in trees]
    report = evaluate_predictions(trees, preds)
    for m in ("lob", "seg", "sub"):
        assert report[f"{m}_acc"] == report[f"{m}_f1"] == 1.0
    assert report["seg_cs"] == 1.0
    assert report["hierarchy_agreement_seg"] == 1.0
    if report["n_abnormal"]:
        assert report["anomaly_precision"] == report["anomaly_recall"] == 1.0
