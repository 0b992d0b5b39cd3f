"""Per-branch geometric feature rows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import AirwayTree

FEATURE_NAMES = (
    "start_x", "start_y", "start_z",
    "mid_x", "mid_y", "mid_z",
    "end_x", "end_y", "end_z",
    "dir_x", "dir_y", "dir_z",
    "length",
    "depth",
    "parent_cos",
    "children",
)


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES

    @property
    def shape(self):
        return self.values.shape


def extract_features(tree: AirwayTree) -> FeatureMatrix:
    """16 features per node, invariant to translation and uniform scaling.

    Coordinates are min-max normalized by the tree's bounding box (a flat
    axis maps to 0.5), length is relative to the root branch, depth is
    relative to the deepest node.
    """
    start = np.array([n.start_point for n in tree.nodes], dtype=np.float64)
    end = np.array([n.end_point for n in tree.nodes], dtype=np.float64)
    mid = 0.5 * (start + end)

    pts = np.vstack([start, end])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    flat = span <= 0

    def norm(p):
        out = np.empty_like(p)
        out[:, ~flat] = (p[:, ~flat] - lo[~flat]) / span[~flat]
        out[:, flat] = 0.5
        return np.clip(out, 0.0, 1.0)

    vec = end - start
    length = np.linalg.norm(vec, axis=1)
    direction = vec / length[:, None]

    depth = tree.depths.astype(np.float64)
    max_depth = depth.max()
    rel_depth = depth / max_depth if max_depth > 0 else np.zeros_like(depth)

    parents = tree.parents
    parent_cos = np.ones(tree.N)
    has_parent = parents >= 0
    parent_cos[has_parent] = np.einsum("ij,ij->i", direction[has_parent], direction[parents[has_parent]])
    parent_cos = np.clip(parent_cos, -1.0, 1.0)

    n_children = np.array([len(c) for c in tree.children], dtype=np.float64)

    values = np.column_stack(
        [
            norm(start),
            norm(mid),
            norm(end),
            direction,
            length / length[tree.root],
            rel_depth,
            parent_cos,
            np.clip(n_children / 3.0, 0.0, 1.0),
        ]
    )
    return FeatureMatrix(values=values)
