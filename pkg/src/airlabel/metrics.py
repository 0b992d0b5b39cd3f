"""Classification metrics, segmental consistency and test-set evaluation."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tree import AirwayTree, Nomenclature

TABLE_COLUMNS = (
    "lob_acc", "lob_pr", "lob_rc", "lob_f1",
    "seg_cs", "seg_acc", "seg_pr", "seg_rc", "seg_f1",
    "sub_acc", "sub_pr", "sub_rc", "sub_f1",
)


def accuracy(pred, gt, exclude_abnormal: bool = False, abnormal=None) -> float:
    """Fraction of correct nodes; ground-truth abnormal nodes optionally dropped."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    keep = np.ones(len(gt), dtype=bool)
    if exclude_abnormal:
        if abnormal is None:
            raise ValueError("exclude_abnormal requires the ground-truth abnormal flags")
        keep = ~np.asarray(abnormal, dtype=bool)
    if not keep.any():
        return float("nan")
    return float(np.mean(pred[keep] == gt[keep]))


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; ids up to ``n_classes`` (outlier) allowed."""
    size = n_classes + 1
    cm = np.zeros((size, size), dtype=np.int64)
    np.add.at(cm, (np.asarray(gt), np.asarray(pred)), 1)
    return cm


def macro_prf(pred, gt, n_classes: int) -> tuple[float, float, float]:
    """Macro precision, recall and F1 over classes present in ``gt``.

    A present class that is never predicted has precision 0; per-class F1 is
    0 when precision and recall are both 0. F1 is the mean of per-class F1.
    """
    cm = confusion_matrix(pred, gt, n_classes)
    present = np.flatnonzero(cm.sum(axis=1) > 0)
    if len(present) == 0:
        return float("nan"), float("nan"), float("nan")
    tp = np.diag(cm)[present].astype(np.float64)
    pred_count = cm.sum(axis=0)[present]
    true_count = cm.sum(axis=1)[present]
    precision = np.divide(tp, pred_count, out=np.zeros_like(tp), where=pred_count > 0)
    recall = tp / true_count
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(precision.mean()), float(recall.mean()), float(f1.mean())


def consistency_counts(pred_seg, tree: AirwayTree, nom: Nomenclature) -> tuple[int, int, int]:
    """Return ``(consistent eligible, eligible, uniform over all nodes)``.

    A node is uniform when every descendant carries its predicted segmental
    label; descendants predicted as outlier sit outside the nomenclature and
    are skipped. Eligible nodes are those predicted as a proper segment.
    """
    pred = np.asarray(pred_seg)
    proper = np.zeros(nom.n_seg + 1, dtype=bool)
    proper[list(nom.proper_segment_ids)] = True
    outlier = pred == nom.outlier_seg

    # bottom-up: set of non-outlier labels found in each subtree (excluding the node)
    below: list[set] = [set() for _ in range(tree.N)]
    for i in reversed(tree.order):
        for c in tree.children[i]:
            below[i] |= below[c]
            if not outlier[c]:
                below[i].add(int(pred[c]))
    uniform = np.array([below[i] <= {int(pred[i])} for i in range(tree.N)])
    eligible = proper[pred]
    return int((uniform & eligible).sum()), int(eligible.sum()), int(uniform.sum())


def consistency(pred_seg, tree: AirwayTree, nom: Nomenclature | None = None) -> float:
    """Share of proper-segment predictions whose whole subtree agrees (1.0 if none)."""
    ok, eligible, _ = consistency_counts(pred_seg, tree, nom or tree.nomenclature)
    return 1.0 if eligible == 0 else ok / eligible


def consistency_all(pred_seg, tree: AirwayTree, nom: Nomenclature | None = None) -> float:
    _, _, uniform = consistency_counts(pred_seg, tree, nom or tree.nomenclature)
    return uniform / tree.N


def anomaly_pr(pred_abnormal, gt_abnormal) -> tuple[float, float]:
    """(precision, recall) of the outlier decision; nan when undefined."""
    pred = np.asarray(pred_abnormal, dtype=bool)
    gt = np.asarray(gt_abnormal, dtype=bool)
    tp = int((pred & gt).sum())
    precision = tp / pred.sum() if pred.sum() else float("nan")
    recall = tp / gt.sum() if gt.sum() else float("nan")
    return float(precision), float(recall)


def evaluate_predictions(trees: Sequence[AirwayTree], preds: Sequence[dict]) -> dict:
    """Pool nodes over trees and compute every metric.

    ``preds[k]`` maps ``lob``/``seg``/``sub`` to label arrays and
    ``is_abnormal_pred`` to the outlier decision. Class metrics exclude
    ground-truth abnormal nodes; CS is averaged over pooled eligible nodes.
    """
    nom = trees[0].nomenclature
    pooled = {m: ([], []) for m in ("lob", "seg", "sub")}
    abn_gt, abn_pred = [], []
    cs_ok = cs_eligible = cs_uniform = n_nodes = 0
    hier_agree = {"seg": [], "lob": []}
    for tree, pred in zip(trees, preds):
        normal = ~tree.abnormal
        for m in pooled:
            pooled[m][0].append(np.asarray(pred[m])[normal])
            pooled[m][1].append(tree.labels(m)[normal])
        abn_gt.append(tree.abnormal)
        abn_pred.append(np.asarray(pred["is_abnormal_pred"], dtype=bool))
        ok, eligible, uniform = consistency_counts(pred["seg"], tree, nom)
        cs_ok, cs_eligible, cs_uniform = cs_ok + ok, cs_eligible + eligible, cs_uniform + uniform
        n_nodes += tree.N
        proj_seg = nom.sub_to_seg_array[np.asarray(pred["sub"])]
        proj_lob = nom.seg_to_lob_array[proj_seg]
        hier_agree["seg"].append(proj_seg == np.asarray(pred["seg"]))
        hier_agree["lob"].append(proj_lob == np.asarray(pred["lob"]))

    report: dict = {"n_trees": len(trees), "n_nodes": n_nodes}
    for m in ("lob", "seg", "sub"):
        p, g = np.concatenate(pooled[m][0]), np.concatenate(pooled[m][1])
        report[f"{m}_acc"] = accuracy(p, g)
        report[f"{m}_pr"], report[f"{m}_rc"], report[f"{m}_f1"] = macro_prf(p, g, nom.n_classes(m))
    report["seg_cs"] = 1.0 if cs_eligible == 0 else cs_ok / cs_eligible
    report["cs_eligible"] = report["seg_cs"]
    report["cs_all"] = cs_uniform / n_nodes if n_nodes else float("nan")
    report["anomaly_precision"], report["anomaly_recall"] = anomaly_pr(
        np.concatenate(abn_pred), np.concatenate(abn_gt)
    )
    report["n_abnormal"] = int(np.concatenate(abn_gt).sum())
    report["hierarchy_agreement_seg"] = float(np.concatenate(hier_agree["seg"]).mean())
    report["hierarchy_agreement_lob"] = float(np.concatenate(hier_agree["lob"]).mean())
    return report


def evaluate_model(model, trees: Sequence[AirwayTree], inputs=None) -> tuple[dict, list]:
    """Predict every tree and evaluate; returns ``(report, bundles)``."""
    from .training import predict

    bundles = [
        predict(t, model, None if inputs is None else inputs[k]) for k, t in enumerate(trees)
    ]
    preds = [{**b.labels, "is_abnormal_pred": b.abnormal_pred} for b in bundles]
    return evaluate_predictions(trees, preds), bundles
