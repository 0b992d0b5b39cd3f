import math
from dataclasses import replace

import numpy as np
import pytest

from airlabel.features import FEATURE_NAMES, extract_features
from airlabel.synth import GenConfig, generate_deformed_tree, generate_tree
from airlabel.tree import BranchNode, build_tree

from conftest import random_tree


def scalar_features(tree):
    """Loop-by-loop reimplementation used as the oracle."""
    pts = [n.start_point for n in tree.nodes] + [n.end_point for n in tree.nodes]
    lo = [min(p[a] for p in pts) for a in range(3)]
    hi = [max(p[a] for p in pts) for a in range(3)]

    def nc(v, a):
        if hi[a] - lo[a] <= 0:
            return 0.5
        return (v - lo[a]) / (hi[a] - lo[a])

    def direction(n):
        v = [n.end_point[a] - n.start_point[a] for a in range(3)]
        length = math.sqrt(sum(x * x for x in v))
        return [x / length for x in v], length

    def depth(i):
        d = 0
        while tree.nodes[i].parent is not None:
            i = tree.nodes[i].parent
            d += 1
        return d

    depths = [depth(i) for i in range(tree.N)]
    max_depth = max(depths)
    _, root_len = direction(tree.nodes[tree.root])
    rows = []
    for n in tree.nodes:
        mid = [(n.start_point[a] + n.end_point[a]) / 2 for a in range(3)]
        d, length = direction(n)
        if n.parent is None:
            pc = 1.0
        else:
            pd, _ = direction(tree.nodes[n.parent])
            pc = max(-1.0, min(1.0, sum(x * y for x, y in zip(d, pd))))
        kids = sum(1 for m in tree.nodes if m.parent == n.id)
        row = [nc(n.start_point[a], a) for a in range(3)]
        row += [nc(mid[a], a) for a in range(3)]
        row += [nc(n.end_point[a], a) for a in range(3)]
        row += d
        row += [length / root_len, depths[n.id] / max_depth if max_depth else 0.0, pc, min(1.0, kids / 3)]
        rows.append(row)
    return np.array(rows)


def test_singleton_along_z():
    t = build_tree([BranchNode(0, None, (1, 2, 3), (1, 2, 7), 0, 0, 0)])
    f = extract_features(t)
    assert f.values.shape == (1, 16) and len(f.feature_names) == 16
    row = dict(zip(FEATURE_NAMES, f.values[0]))
    assert (row["dir_x"], row["dir_y"], row["dir_z"]) == (0.0, 0.0, 1.0)
    assert row["depth"] == 0.0 and row["parent_cos"] == 1.0 and row["length"] == 1.0
    # x and y axes are flat
    assert row["start_x"] == 0.5 and row["mid_y"] == 0.5
    assert row["start_z"] == 0.0 and row["end_z"] == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_matches_scalar_oracle(seed):
    t = random_tree(np.random.default_rng(seed), 40)
    assert np.abs(extract_features(t).values - scalar_features(t)).max() < 1e-12


def test_generated_tree_matches_oracle():
    t = generate_deformed_tree(GenConfig(atrophy_rate=0.5, anomaly_rate=0.3, distortion_angle_deg=20), 1)
    assert np.abs(extract_features(t).values - scalar_features(t)).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_translation_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    t = generate_tree(GenConfig(), seed)
    shift, scale = rng.normal(size=3) * 100, rng.uniform(0.2, 5.0)
    moved = build_tree(
        [
            replace(
                n,
                start_point=tuple(np.array(n.start_point) * scale + shift),
                end_point=tuple(np.array(n.end_point) * scale + shift),
            )
            for n in t.nodes
        ],
        t.nomenclature,
    )
    np.testing.assert_allclose(extract_features(moved).values, extract_features(t).values, atol=1e-9)


def test_ranges_and_unit_directions():
    cfg = GenConfig(atrophy_rate=0.5, anomaly_rate=0.3, distortion_angle_deg=30)
    for i in range(20):
        v = extract_features(generate_deformed_tree(cfg, i)).values
        assert np.isfinite(v).all()
        assert v[:, :9].min() >= 0 and v[:, :9].max() <= 1
        np.testing.assert_allclose(np.linalg.norm(v[:, 9:12], axis=1), 1.0, atol=1e-12)
