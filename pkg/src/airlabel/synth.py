"""Seeded synthetic bronchial trees with three-level labels.

The label space is derived from the lobe/segment/subsegment layout:

* lobar:        trunk, one class per lobe
* segmental:    trunk, one stem class per lobe, one class per segment
* subsegmental: trunk, lobe stems, one stem class per segment, one class per
  subsegment

Only the per-segment classes are "proper" segments. Anatomy (template branch
directions) is fixed by ``anatomy_seed``; each tree then draws jitter,
topological variants and perturbations from a Philox stream keyed on
``(seed, index, purpose)``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import dataclass_to_dict
from .errors import ConfigInfeasible
from .tree import AirwayTree, BranchNode, Nomenclature, build_tree, save_tree

TRUNK = 0

# nominal branch lengths (mm) and branching angles (deg) per generation role
_LENGTH = {"trachea": 100.0, "main": 45.0, "lobe": 25.0, "stem": 10.0, "seg": 15.0, "sub": 10.0, "extra": 7.0}
_ANGLE = {"main": 35.0, "lobe": 35.0, "seg": 45.0, "sub": 40.0, "extra": 35.0}
MIN_SIBLING_SEPARATION_DEG = 10.0


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_lobes: int = 5
    segments_per_lobe: int | tuple[int, ...] = 2
    subsegments_per_segment: int | tuple[int, ...] = 2
    extra_generations: int = 2
    extra_children: int = 2
    anomaly_rate: float = 0.05
    atrophy_rate: float = 0.0
    distortion_angle_deg: float = 0.0
    variant_rate: float = 0.2
    direction_jitter_deg: float = 6.0
    length_scale: float = 1.0
    length_cv: float = 0.15
    anomaly_angle_deg: tuple[float, float] = (70.0, 110.0)
    anomalies_in_train: bool = True
    anatomy_seed: int = 7
    nomenclature_sizes: tuple[int, int, int] | None = None

    def __post_init__(self):
        for name in ("anomaly_rate", "atrophy_rate", "variant_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.extra_generations < 0 or self.extra_children < 1:
            raise ValueError("extra_generations >= 0 and extra_children >= 1 required")
        if self.distortion_angle_deg < 0 or self.direction_jitter_deg < 0:
            raise ValueError("angles must be non-negative")
        if self.length_scale <= 0 or self.length_cv < 0:
            raise ValueError("length_scale > 0 and length_cv >= 0 required")
        lo, hi = self.anomaly_angle_deg
        if not 0 <= lo <= hi <= 180:
            raise ValueError("anomaly_angle_deg must be an increasing pair within [0, 180]")

    def clean(self) -> "GenConfig":
        """Same anatomy with atrophy and distortion switched off."""
        return replace(
            self,
            atrophy_rate=0.0,
            distortion_angle_deg=0.0,
            anomaly_rate=self.anomaly_rate if self.anomalies_in_train else 0.0,
        )


def make_rng(seed: int, index: int, purpose: str) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, index, purpose)``."""
    digest = hashlib.sha256(f"{seed}:{index}:{purpose}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# -- geometry helpers -------------------------------------------------------

def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _perp_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = _unit(np.cross(d, ref))
    return u, np.cross(d, u)


def tilt(d, angle_deg: float, azimuth: float) -> np.ndarray:
    """Rotate unit vector ``d`` by ``angle_deg`` towards azimuth ``azimuth`` (rad)."""
    d = _unit(d)
    u, v = _perp_basis(d)
    a = math.radians(angle_deg)
    return _unit(math.cos(a) * d + math.sin(a) * (math.cos(azimuth) * u + math.sin(azimuth) * v))


def _angle_deg(a, b) -> float:
    return math.degrees(math.acos(float(np.clip(np.dot(_unit(a), _unit(b)), -1.0, 1.0))))


# -- layout and nomenclature ---------------------------------------------------

@dataclass(frozen=True)
class Layout:
    n_lobes: int
    segments: tuple[int, ...]  # segment count per lobe
    subsegments: tuple[int, ...]  # subsegment count per (global) segment
    nomenclature: Nomenclature

    def lob_class(self, lobe: int) -> int:
        return 1 + lobe

    def seg_stem_class(self, lobe: int) -> int:
        return 1 + lobe

    def seg_class(self, segment: int) -> int:
        return 1 + self.n_lobes + segment

    def sub_lobe_stem_class(self, lobe: int) -> int:
        return 1 + lobe

    def sub_seg_stem_class(self, segment: int) -> int:
        return 1 + self.n_lobes + segment

    def sub_class(self, subsegment: int) -> int:
        return 1 + self.n_lobes + sum(self.segments) + subsegment


def _expand(value, n: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ConfigInfeasible(f"{name} lists {len(value)} entries, layout needs {n}")
    return value


def make_layout(cfg: GenConfig) -> Layout:
    if cfg.n_lobes < 1:
        raise ConfigInfeasible("n_lobes must be at least 1")
    segments = _expand(cfg.segments_per_lobe, cfg.n_lobes, "segments_per_lobe")
    if any(s < 1 for s in segments):
        raise ConfigInfeasible("every lobe needs at least one segment")
    n_seg_total = sum(segments)
    subsegments = _expand(cfg.subsegments_per_segment, n_seg_total, "subsegments_per_segment")
    if any(s < 0 for s in subsegments):
        raise ConfigInfeasible("subsegment counts must be non-negative")
    n_sub_total = sum(subsegments)

    L, S = cfg.n_lobes, n_seg_total
    seg_to_lob = [TRUNK] + [1 + l for l in range(L)]
    for l, k in enumerate(segments):
        seg_to_lob += [1 + l] * k
    sub_to_seg = [TRUNK] + [1 + l for l in range(L)] + [1 + L + s for s in range(S)]
    for s, k in enumerate(subsegments):
        sub_to_seg += [1 + L + s] * k
    nom = Nomenclature(
        n_lob=1 + L,
        n_seg=1 + L + S,
        n_sub=1 + L + S + n_sub_total,
        sub_to_seg=tuple(sub_to_seg),
        seg_to_lob=tuple(seg_to_lob),
        proper_segment_ids=tuple(1 + L + s for s in range(S)),
    )
    if cfg.nomenclature_sizes is not None:
        sizes = tuple(cfg.nomenclature_sizes)
        if sizes != (nom.n_lob, nom.n_seg, nom.n_sub):
            raise ConfigInfeasible(
                f"layout yields nomenclature sizes {(nom.n_lob, nom.n_seg, nom.n_sub)}, config asks for {sizes}"
            )
    return Layout(n_lobes=L, segments=segments, subsegments=subsegments, nomenclature=nom)


def _templates(layout: Layout, anatomy_seed: int) -> dict:
    """Fixed per-anatomy branch directions shared by every generated tree."""
    rng = make_rng(anatomy_seed, 0, "anatomy")
    out: dict = {"trachea": np.array([0.0, 0.0, -1.0])}
    L = layout.n_lobes
    if L > 1:
        out["main_r"] = tilt(out["trachea"], _ANGLE["main"], math.pi)
        out["main_l"] = tilt(out["trachea"], _ANGLE["main"], 0.0)

    def fan(parent, k, angle, offset):
        return [tilt(parent, angle, offset + 2 * math.pi * j / k) for j in range(k)]

    if L == 1:
        out["lobe"] = [tilt(out["trachea"], _ANGLE["lobe"] / 2, rng.uniform(0, 2 * math.pi))]
    else:
        n_right = (L + 1) // 2
        right = fan(out["main_r"], n_right, _ANGLE["lobe"], rng.uniform(0, 2 * math.pi))
        left = fan(out["main_l"], L - n_right, _ANGLE["lobe"], rng.uniform(0, 2 * math.pi))
        out["lobe"] = right + left

    out["seg"] = []
    for l, k in enumerate(layout.segments):
        angle = _ANGLE["seg"] if k > 1 else _ANGLE["seg"] / 2
        out["seg"] += fan(out["lobe"][l], k, angle, rng.uniform(0, 2 * math.pi))
    out["sub"] = []
    for s, k in enumerate(layout.subsegments):
        if k == 0:
            continue
        angle = _ANGLE["sub"] if k > 1 else _ANGLE["sub"] / 2
        out["sub"] += fan(out["seg"][s], k, angle, rng.uniform(0, 2 * math.pi))
    return out


# -- generation ---------------------------------------------------------------

class _Builder:
    def __init__(self, cfg: GenConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.nodes: list[dict] = []

    def add(self, parent, direction, role, labels, jitter=True):
        cfg, rng = self.cfg, self.rng
        d = _unit(direction)
        if jitter and cfg.direction_jitter_deg > 0:
            d = tilt(d, rng.uniform(0, cfg.direction_jitter_deg), rng.uniform(0, 2 * math.pi))
        length = _LENGTH[role] * cfg.length_scale * max(0.3, 1.0 + cfg.length_cv * rng.standard_normal())
        start = np.zeros(3) if parent is None else self.nodes[parent]["end"]
        self.nodes.append(
            {
                "parent": parent,
                "start": start,
                "end": start + length * d,
                "labels": labels,
                "abnormal": False,
            }
        )
        return len(self.nodes) - 1


def generate_tree(cfg: GenConfig, index: int, purpose: str = "tree") -> AirwayTree:
    """Build one labeled tree; deterministic in ``(cfg, index, purpose)``."""
    layout = make_layout(cfg)
    tmpl = _templates(layout, cfg.anatomy_seed)
    rng = make_rng(cfg.seed, index, purpose)
    b = _Builder(cfg, rng)
    trunk = (TRUNK, TRUNK, TRUNK)

    trachea = b.add(None, tmpl["trachea"], "trachea", trunk)
    if layout.n_lobes == 1:
        lobe_parent = {0: trachea}
    else:
        n_right = (layout.n_lobes + 1) // 2
        main_r = b.add(trachea, tmpl["main_r"], "main", trunk)
        main_l = b.add(trachea, tmpl["main_l"], "main", trunk)
        lobe_parent = {l: main_r if l < n_right else main_l for l in range(layout.n_lobes)}

    seg_offsets = np.concatenate([[0], np.cumsum(layout.segments)])
    sub_offsets = np.concatenate([[0], np.cumsum(layout.subsegments)])
    for l in range(layout.n_lobes):
        lobe_labels = (layout.lob_class(l), layout.seg_stem_class(l), layout.sub_lobe_stem_class(l))
        lobe = b.add(lobe_parent[l], tmpl["lobe"][l], "lobe", lobe_labels)
        segs = list(range(seg_offsets[l], seg_offsets[l + 1]))
        attach = {s: lobe for s in segs}
        if len(segs) >= 3 and rng.random() < cfg.variant_rate:
            # one segment leaves the lobar bronchus first, the rest share a stem
            first = segs[int(rng.integers(len(segs)))]
            rest = [s for s in segs if s != first]
            stem_dir = _unit(sum(tmpl["seg"][s] for s in rest))
            stem = b.add(lobe, stem_dir, "stem", lobe_labels)
            attach.update({s: stem for s in rest})
        for s in segs:
            seg_labels = (layout.lob_class(l), layout.seg_class(s), layout.sub_seg_stem_class(s))
            seg = b.add(attach[s], tmpl["seg"][s], "seg", seg_labels)
            for t in range(sub_offsets[s], sub_offsets[s + 1]):
                sub_labels = (layout.lob_class(l), layout.seg_class(s), layout.sub_class(t))
                sub = b.add(seg, tmpl["sub"][t], "sub", sub_labels)
                _grow_extra(b, sub, tmpl["sub"][t], sub_labels)

    nodes = [
        BranchNode(
            id=i,
            parent=n["parent"],
            start_point=tuple(n["start"]),
            end_point=tuple(n["end"]),
            label_lob=n["labels"][0],
            label_seg=n["labels"][1],
            label_sub=n["labels"][2],
            is_abnormal=False,
        )
        for i, n in enumerate(b.nodes)
    ]
    return build_tree(nodes, layout.nomenclature)


def _grow_extra(b: _Builder, node: int, direction, labels) -> None:
    frontier = [(node, direction)]
    for g in range(b.cfg.extra_generations):
        nxt = []
        k = b.cfg.extra_children
        for parent, pdir in frontier:
            offset = b.rng.uniform(0, 2 * math.pi)
            for j in range(k):
                d = tilt(pdir, _ANGLE["extra"] if k > 1 else _ANGLE["extra"] / 2, offset + 2 * math.pi * j / k)
                child = b.add(parent, d, "extra", labels)
                b.nodes[child]["end"] = b.nodes[child]["start"] + (
                    b.nodes[child]["end"] - b.nodes[child]["start"]
                ) * (0.8**g)
                nxt.append((child, d))
        frontier = nxt


# -- perturbations --------------------------------------------------------------

def _direction(node: BranchNode) -> np.ndarray:
    return _unit(np.subtract(node.end_point, node.start_point))


def anomaly_sites(tree: AirwayTree) -> list[int]:
    """Nodes that open a new subsegmental class inside a proper segment."""
    nom = tree.nomenclature
    proper = set(nom.proper_segment_ids)
    sites = []
    for node in tree.nodes:
        if node.parent is None or node.is_abnormal or node.label_seg not in proper:
            continue
        if tree.nodes[node.parent].label_sub != node.label_sub:
            sites.append(node.id)
    return sites


def segment_roots(tree: AirwayTree) -> list[int]:
    proper = set(tree.nomenclature.proper_segment_ids)
    return [
        n.id
        for n in tree.nodes
        if n.parent is not None
        and n.label_seg in proper
        and tree.nodes[n.parent].label_seg != n.label_seg
    ]


def inject_anomalies(tree: AirwayTree, cfg: GenConfig, rng: np.random.Generator) -> AirwayTree:
    """Attach outlier-labeled leaf branches at segmental/subsegmental sites."""
    nom = tree.nomenclature
    nodes = list(tree.nodes)
    children = {i: list(c) for i, c in enumerate(tree.children)}
    lo, hi = cfg.anomaly_angle_deg
    for site in anomaly_sites(tree):
        if rng.random() >= cfg.anomaly_rate:
            continue
        parent = nodes[site]
        pdir = _direction(parent)
        sibling_dirs = [_direction(nodes[c]) for c in children[site]]
        for _ in range(100):
            polar = math.degrees(math.acos(rng.uniform(math.cos(math.radians(hi)), math.cos(math.radians(lo)))))
            d = tilt(pdir, polar, rng.uniform(0, 2 * math.pi))
            if all(_angle_deg(d, s) >= MIN_SIBLING_SEPARATION_DEG for s in sibling_dirs):
                break
        length = _LENGTH["sub"] * cfg.length_scale * rng.uniform(0.6, 1.4)
        new_id = len(nodes)
        start = np.array(parent.end_point)
        nodes.append(
            BranchNode(
                id=new_id,
                parent=site,
                start_point=tuple(start),
                end_point=tuple(start + length * d),
                label_lob=nom.outlier_lob,
                label_seg=nom.outlier_seg,
                label_sub=nom.outlier_sub,
                is_abnormal=True,
            )
        )
        children[site].append(new_id)
    if len(nodes) == tree.N:
        return tree
    return build_tree(nodes, nom)


def _keep_nodes(tree: AirwayTree, keep: np.ndarray) -> AirwayTree:
    new_id = np.cumsum(keep) - 1
    nodes = []
    for node in tree.nodes:
        if not keep[node.id]:
            continue
        nodes.append(
            replace(
                node,
                id=int(new_id[node.id]),
                parent=None if node.parent is None else int(new_id[node.parent]),
            )
        )
    return build_tree(nodes, tree.nomenclature)


def apply_atrophy(tree: AirwayTree, cfg: GenConfig, rng: np.random.Generator,
                  cut_depth: int | None = None) -> AirwayTree:
    """Prune the distal part of proper-segment subtrees with probability ``atrophy_rate``.

    A cut depth ``c`` keeps descendants at most ``c`` generations below the
    segment root; ``c = 0`` keeps only the segment root itself. When
    ``cut_depth`` is None it is drawn uniformly per pruned segment.
    """
    keep = np.ones(tree.N, dtype=bool)
    depth = tree.depths
    for root in segment_roots(tree):
        if rng.random() >= cfg.atrophy_rate:
            continue
        members = tree.subtree(root)
        rel = depth[members] - depth[root]
        max_rel = int(rel.max())
        if max_rel == 0:
            continue
        c = int(rng.integers(max_rel)) if cut_depth is None else cut_depth
        for m, r in zip(members, rel):
            if r > c:
                keep[m] = False
    if keep.all():
        return tree
    return _keep_nodes(tree, keep)


def apply_distortion(tree: AirwayTree, cfg: GenConfig, rng: np.random.Generator) -> AirwayTree:
    """Rotate every branch by up to ``distortion_angle_deg`` and re-chain start points."""
    if cfg.distortion_angle_deg == 0:
        return tree
    ends: dict[int, np.ndarray] = {}
    new_nodes: dict[int, BranchNode] = {}
    for i in tree.order:
        node = tree.nodes[i]
        start = np.array(node.start_point) if node.parent is None else ends[node.parent]
        vec = np.subtract(node.end_point, node.start_point)
        length = float(np.linalg.norm(vec))
        d = tilt(vec, rng.uniform(0, cfg.distortion_angle_deg), rng.uniform(0, 2 * math.pi))
        end = start + length * d
        ends[i] = end
        new_nodes[i] = replace(node, start_point=tuple(start), end_point=tuple(end))
    return build_tree([new_nodes[i] for i in range(tree.N)], tree.nomenclature)


def generate_deformed_tree(cfg: GenConfig, index: int, purpose: str = "test") -> AirwayTree:
    """Base tree followed by atrophy, anomaly injection and distortion."""
    tree = generate_tree(cfg, index, purpose)
    tree = apply_atrophy(tree, cfg, make_rng(cfg.seed, index, purpose + "/atrophy"))
    tree = inject_anomalies(tree, cfg, make_rng(cfg.seed, index, purpose + "/anomaly"))
    tree = apply_distortion(tree, cfg, make_rng(cfg.seed, index, purpose + "/distortion"))
    return tree


def make_dataset(cfg: GenConfig, n_train: int, n_test: int, out_dir) -> dict:
    """Write train/test tree files and ``manifest.json``; return the manifest.

    Train trees use :meth:`GenConfig.clean` (no atrophy, no distortion); test
    trees get every perturbation. The two splits draw from disjoint streams.
    """
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.clean()
    manifest = {"config": dataclass_to_dict(cfg), "train": [], "test": []}
    for i in range(n_train):
        rel = f"train/tree_{i:05d}.json"
        save_tree(generate_deformed_tree(train_cfg, i, "train"), out / rel)
        manifest["train"].append(rel)
    for i in range(n_test):
        rel = f"test/tree_{i:05d}.json"
        save_tree(generate_deformed_tree(cfg, i, "test"), out / rel)
        manifest["test"].append(rel)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def generate_split(cfg: GenConfig, n_train: int, n_test: int) -> tuple[list[AirwayTree], list[AirwayTree]]:
    """In-memory equivalent of :func:`make_dataset`."""
    train_cfg = cfg.clean()
    train = [generate_deformed_tree(train_cfg, i, "train") for i in range(n_train)]
    test = [generate_deformed_tree(cfg, i, "test") for i in range(n_test)]
    return train, test


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text(encoding="utf-8"))
