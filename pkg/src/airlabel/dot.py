"""Graphviz DOT rendering of a labeled tree."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from matplotlib.colors import to_hex

from .tree import AirwayTree

ERROR_COLOR = "#ff0000"
OUTLIER_FILL = "#d9d9d9"


def segment_color(seg: int, n_seg: int) -> str:
    cmap = colormaps["tab20"]
    return to_hex(cmap(seg % cmap.N)) if seg < n_seg else OUTLIER_FILL


def tree_to_dot(tree: AirwayTree, pred: dict, name: str = "airway") -> str:
    """Nodes filled by predicted segment; wrong subsegmental labels drawn red; predicted anomalies dashed.

    ``pred`` holds per-node arrays ``seg``, ``sub`` and ``is_abnormal_pred``
    (as returned by :func:`airlabel.training.read_predictions`).
    """
    nom = tree.nomenclature
    n_seg = nom.n_seg if nom is not None else int(np.max(pred["seg"])) + 1
    gt_sub = tree.labels("sub")
    lines = [f"digraph {name} {{", "  node [shape=box, style=filled, fontsize=10];"]
    for i in range(tree.N):
        seg, sub = int(pred["seg"][i]), int(pred["sub"][i])
        wrong = sub != gt_sub[i]
        styles = ["filled"]
        if pred["is_abnormal_pred"][i]:
            styles.append("dashed")
        attrs = {
            "label": f"{i}\\nseg {seg} / sub {sub}" + (f"\\n(gt {gt_sub[i]})" if wrong else ""),
            "fillcolor": segment_color(seg, n_seg),
            "style": ",".join(styles),
        }
        if wrong:
            attrs.update(color=ERROR_COLOR, fontcolor=ERROR_COLOR, penwidth="2")
        body = ", ".join(f'{k}="{v}"' for k, v in attrs.items())
        lines.append(f"  n{i} [{body}];")
    for node in tree.nodes:
        if node.parent is not None:
            lines.append(f"  n{node.parent} -> n{node.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_dot(tree: AirwayTree, pred: dict, path) -> None:
    Path(path).write_text(tree_to_dot(tree, pred), encoding="utf-8")
