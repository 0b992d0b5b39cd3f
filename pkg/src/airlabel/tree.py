"""Rooted airway-branch trees, label hierarchy and the branch-graph file format.

Node ids are ``0..N-1`` and every N x N matrix produced here is indexed in id
order. Trees are immutable once built; derived arrays are cached and returned
read-only.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DegenerateBranch,
    DisconnectedNode,
    MultipleRoots,
    ParseError,
    SchemaVersionMismatch,
    TreeError,
    UnknownCategory,
)

SCHEMA_VERSION = 1
CONTINUITY_TOL_MM = 1e-6

Point = tuple[float, float, float]


@dataclass(frozen=True)
class Nomenclature:
    """Three-level label space.

    Normal categories are ``0..n-1`` at each level; the outlier id at a level
    equals that level's count. ``sub_to_seg`` and ``seg_to_lob`` cover the
    normal categories only, outlier always projects to outlier.
    """

    n_lob: int
    n_seg: int
    n_sub: int
    sub_to_seg: tuple[int, ...]
    seg_to_lob: tuple[int, ...]
    proper_segment_ids: tuple[int, ...]

    def __post_init__(self):
        for name in ("sub_to_seg", "seg_to_lob", "proper_segment_ids"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if min(self.n_lob, self.n_seg, self.n_sub) < 1:
            raise ValueError("every level needs at least one normal category")
        if len(self.sub_to_seg) != self.n_sub:
            raise ValueError(f"sub_to_seg has {len(self.sub_to_seg)} entries, expected {self.n_sub}")
        if len(self.seg_to_lob) != self.n_seg:
            raise ValueError(f"seg_to_lob has {len(self.seg_to_lob)} entries, expected {self.n_seg}")
        if any(not 0 <= s < self.n_seg for s in self.sub_to_seg):
            raise ValueError("sub_to_seg maps outside the segmental categories")
        if any(not 0 <= s < self.n_lob for s in self.seg_to_lob):
            raise ValueError("seg_to_lob maps outside the lobar categories")
        if any(not 0 <= s < self.n_seg for s in self.proper_segment_ids):
            raise ValueError("proper_segment_ids must be normal segmental categories")

    @property
    def outlier_lob(self) -> int:
        return self.n_lob

    @property
    def outlier_seg(self) -> int:
        return self.n_seg

    @property
    def outlier_sub(self) -> int:
        return self.n_sub

    def n_classes(self, level: str) -> int:
        return {"lob": self.n_lob, "seg": self.n_seg, "sub": self.n_sub}[level]

    @cached_property
    def sub_to_seg_array(self) -> np.ndarray:
        arr = np.array(self.sub_to_seg + (self.n_seg,), dtype=np.int64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def seg_to_lob_array(self) -> np.ndarray:
        arr = np.array(self.seg_to_lob + (self.n_lob,), dtype=np.int64)
        arr.setflags(write=False)
        return arr

    def to_dict(self) -> dict:
        return {
            "n_lob": self.n_lob,
            "n_seg": self.n_seg,
            "n_sub": self.n_sub,
            "sub_to_seg": list(self.sub_to_seg),
            "seg_to_lob": list(self.seg_to_lob),
            "proper_segment_ids": list(self.proper_segment_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Nomenclature":
        keys = {"n_lob", "n_seg", "n_sub", "sub_to_seg", "seg_to_lob", "proper_segment_ids"}
        missing = keys - set(d)
        if missing:
            raise ParseError(f"nomenclature: missing field(s) {sorted(missing)}")
        extra = set(d) - keys
        if extra:
            raise ParseError(f"nomenclature: unknown field(s) {sorted(extra)}")
        try:
            return cls(**{k: d[k] for k in keys})
        except (TypeError, ValueError) as exc:
            raise ParseError(f"nomenclature: {exc}") from exc


@dataclass(frozen=True)
class BranchNode:
    id: int
    parent: int | None
    start_point: Point
    end_point: Point
    label_lob: int
    label_seg: int
    label_sub: int
    is_abnormal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "start_point", tuple(float(v) for v in self.start_point))
        object.__setattr__(self, "end_point", tuple(float(v) for v in self.end_point))

    @property
    def length(self) -> float:
        return math.dist(self.start_point, self.end_point)


@dataclass(frozen=True)
class AirwayTree:
    nodes: tuple[BranchNode, ...]
    root: int
    children: tuple[tuple[int, ...], ...] = field(compare=False, repr=False)
    nomenclature: Nomenclature | None = None

    @property
    def N(self) -> int:
        return len(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def parents(self) -> np.ndarray:
        """Parent id per node, -1 for the root."""
        arr = np.array([-1 if n.parent is None else n.parent for n in self.nodes], dtype=np.int64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Breadth-first order from the root (parents before children)."""
        out = [self.root]
        for i in out:
            out.extend(self.children[i])
        return tuple(out)

    @cached_property
    def depths(self) -> np.ndarray:
        depth = np.zeros(self.N, dtype=np.int64)
        for i in self.order[1:]:
            depth[i] = depth[self.nodes[i].parent] + 1
        depth.setflags(write=False)
        return depth

    @cached_property
    def ancestor_matrix(self) -> np.ndarray:
        """``A[i, j]`` is True iff ``j`` is ``i`` or an ancestor of ``i``."""
        anc = np.zeros((self.N, self.N), dtype=bool)
        for i in self.order:
            p = self.nodes[i].parent
            if p is not None:
                anc[i] = anc[p]
            anc[i, i] = True
        anc.setflags(write=False)
        return anc

    def labels(self, level: str) -> np.ndarray:
        attr = {"lob": "label_lob", "seg": "label_seg", "sub": "label_sub"}[level]
        return np.array([getattr(n, attr) for n in self.nodes], dtype=np.int64)

    @property
    def abnormal(self) -> np.ndarray:
        return np.array([n.is_abnormal for n in self.nodes], dtype=bool)

    def subtree(self, i: int) -> list[int]:
        """``i`` and all its descendants in breadth-first order."""
        out = [i]
        for j in out:
            out.extend(self.children[j])
        return out


def build_tree(nodes: Iterable[BranchNode], nomenclature: Nomenclature | None = None) -> AirwayTree:
    """Validate parent links and return an immutable tree.

    Raises MultipleRoots, CycleDetected or DisconnectedNode naming the
    offending ids. Geometric discontinuities between a parent's end point and
    a child's start point only produce a warning.
    """
    nodes = tuple(nodes)
    n = len(nodes)
    if n == 0:
        raise TreeError("a tree needs at least one node")
    for k, node in enumerate(nodes):
        if node.id != k:
            raise TreeError(f"node ids must be 0..N-1 in order; position {k} holds id {node.id}")
        if node.parent is not None and not 0 <= node.parent < n:
            raise TreeError(f"node {k} references parent {node.parent} outside [0, {n})")
        if node.start_point == node.end_point:
            raise DegenerateBranch(k)

    roots = [node.id for node in nodes if node.parent is None]
    if len(roots) > 1:
        raise MultipleRoots(roots)

    children: list[list[int]] = [[] for _ in range(n)]
    for node in nodes:
        if node.parent is not None:
            children[node.parent].append(node.id)

    reached = np.zeros(n, dtype=bool)
    if roots:
        stack = [roots[0]]
        while stack:
            i = stack.pop()
            reached[i] = True
            stack.extend(children[i])
    if not reached.all():
        unreached = [i for i in range(n) if not reached[i]]
        cycle = _find_cycle(nodes, unreached)
        if cycle:
            raise CycleDetected(cycle)
        raise DisconnectedNode(unreached)

    for node in nodes:
        if node.parent is None:
            continue
        gap = math.dist(nodes[node.parent].end_point, node.start_point)
        if gap > CONTINUITY_TOL_MM:
            warnings.warn(
                f"node {node.id} starts {gap:.3g} mm away from its parent's end point",
                stacklevel=2,
            )

    if nomenclature is not None:
        _check_labels(nodes, nomenclature)

    return AirwayTree(
        nodes=nodes,
        root=roots[0],
        children=tuple(tuple(sorted(c)) for c in children),
        nomenclature=nomenclature,
    )


def _find_cycle(nodes: Sequence[BranchNode], candidates: list[int]) -> list[int]:
    for start in candidates:
        seen: dict[int, int] = {}
        path = []
        i: int | None = start
        while i is not None and i not in seen:
            seen[i] = len(path)
            path.append(i)
            i = nodes[i].parent
        if i is not None:
            return sorted(path[seen[i]:])
    return []


def _check_labels(nodes: Sequence[BranchNode], nom: Nomenclature) -> None:
    for node in nodes:
        levels = (
            (node.label_lob, nom.n_lob),
            (node.label_seg, nom.n_seg),
            (node.label_sub, nom.n_sub),
        )
        for value, count in levels:
            if not 0 <= value <= count:
                raise UnknownCategory(f"node {node.id}: label {value} outside [0, {count}]")
        outlier_flags = {value == count for value, count in levels}
        if len(outlier_flags) != 1 or outlier_flags.pop() != node.is_abnormal:
            raise TreeError(
                f"node {node.id}: is_abnormal must coincide with outlier labels at every level"
            )


def shortest_path_distances(tree: AirwayTree) -> np.ndarray:
    """Hop distances on the undirected tree, ``depth(i) + depth(j) - 2 depth(lca)``."""
    anc = tree.ancestor_matrix.astype(np.float64)
    # common ancestors (inclusive) of i and j number depth(lca) + 1
    common = np.rint(anc @ anc.T).astype(np.int64)
    depth = tree.depths
    return depth[:, None] + depth[None, :] - 2 * (common - 1)


def descendant_mask(tree: AirwayTree) -> np.ndarray:
    """``M[i, j] = 1`` iff ``j`` is a strict descendant of ``i``."""
    mask = tree.ancestor_matrix.T.astype(np.int64)
    np.fill_diagonal(mask, 0)
    return mask


def project_labels(sub_labels, nom: Nomenclature) -> tuple[np.ndarray, np.ndarray]:
    """Map subsegmental ids to (segmental, lobar) ids; outlier stays outlier."""
    sub = np.asarray(sub_labels, dtype=np.int64)
    bad = (sub < 0) | (sub > nom.n_sub)
    if bad.any():
        raise UnknownCategory(f"unknown subsegmental id(s): {sorted(set(sub[bad].tolist()))}")
    seg = nom.sub_to_seg_array[sub]
    lob = nom.seg_to_lob_array[seg]
    return seg, lob


def tree_to_dict(tree: AirwayTree) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "root": tree.root,
        "nodes": [
            {
                "id": n.id,
                "parent": n.parent,
                "start": list(n.start_point),
                "end": list(n.end_point),
                "label_lob": n.label_lob,
                "label_seg": n.label_seg,
                "label_sub": n.label_sub,
                "is_abnormal": n.is_abnormal,
            }
            for n in tree.nodes
        ],
    }
    if tree.nomenclature is not None:
        out["nomenclature"] = tree.nomenclature.to_dict()
    return out


_NODE_FIELDS = ("id", "parent", "start", "end", "label_lob", "label_seg", "label_sub", "is_abnormal")


def tree_from_dict(d: dict) -> AirwayTree:
    if not isinstance(d, dict):
        raise ParseError("top level must be a JSON object")
    for key in ("schema_version", "root", "nodes"):
        if key not in d:
            raise ParseError(f"missing top-level field {key!r}")
    if d["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"schema_version {d['schema_version']!r} not supported (expected {SCHEMA_VERSION})"
        )
    nom = Nomenclature.from_dict(d["nomenclature"]) if d.get("nomenclature") is not None else None

    nodes = []
    for k, raw in enumerate(d["nodes"]):
        missing = [f for f in _NODE_FIELDS if f not in raw]
        if missing:
            raise ParseError(f"nodes[{k}]: missing field(s) {missing}")
        try:
            start = [float(v) for v in raw["start"]]
            end = [float(v) for v in raw["end"]]
            if len(start) != 3 or len(end) != 3:
                raise ValueError("start/end must have 3 coordinates")
            nodes.append(
                BranchNode(
                    id=_as_int(raw["id"]),
                    parent=None if raw["parent"] is None else _as_int(raw["parent"]),
                    start_point=tuple(start),
                    end_point=tuple(end),
                    label_lob=_as_int(raw["label_lob"]),
                    label_seg=_as_int(raw["label_seg"]),
                    label_sub=_as_int(raw["label_sub"]),
                    is_abnormal=_as_bool(raw["is_abnormal"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"nodes[{k}]: {exc}") from exc

    tree = build_tree(nodes, nom)
    if tree.root != d["root"]:
        raise ParseError(f"'root' is {d['root']} but node {tree.root} has no parent")
    return tree


def _as_int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected integer, got {v!r}")
    return v


def _as_bool(v) -> bool:
    if not isinstance(v, bool):
        raise ValueError(f"expected boolean, got {v!r}")
    return v


def dumps_tree(tree: AirwayTree) -> str:
    return json.dumps(tree_to_dict(tree), indent=1) + "\n"


def save_tree(tree: AirwayTree, path) -> None:
    Path(path).write_text(dumps_tree(tree), encoding="utf-8")


def load_tree(path) -> AirwayTree:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return tree_from_dict(data)
    except ParseError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
