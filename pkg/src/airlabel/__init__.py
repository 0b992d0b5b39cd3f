"""Hierarchical airway anatomical labeling with soft subtree and anomaly masks."""

from .tree import (
    AirwayTree,
    BranchNode,
    Nomenclature,
    build_tree,
    descendant_mask,
    load_tree,
    project_labels,
    save_tree,
    shortest_path_distances,
)

__version__ = "0.1.0"

__all__ = [
    "AirwayTree",
    "BranchNode",
    "Nomenclature",
    "build_tree",
    "descendant_mask",
    "load_tree",
    "project_labels",
    "save_tree",
    "shortest_path_distances",
]
