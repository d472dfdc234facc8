import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldacp.tree import (
    BucketTree,
    SmoothingKernel,
    build_tree,
    h_map,
    hard_labels,
    leaf_expectations,
    path_nodes,
    psi,
    soft_labels,
)


def leaf_ranges(tree):
    return sorted((tree.nodes[p].lo, tree.nodes[p].hi) for p in tree.leaf_positions)


class TestBuildTree:
    def test_uniform_eight_labels_four_leaves(self):
        tree = build_tree(range(8), 4)
        assert leaf_ranges(tree) == [(0, 2), (2, 4), (4, 6), (6, 8)]
        assert tree.root.lo == 0 and tree.root.hi == 8  # max label + 1

    def test_single_value_collapses_to_one_leaf(self, caplog):
        with caplog.at_level(logging.WARNING):
            tree = build_tree([5] * 100, 4)
        assert tree.num_leaves == 1
        assert tree.nodes[0].expect == 5.0
        assert any("leaves" in r.message for r in caplog.records)

    def test_zero_heavy_labels_collapse_early(self):
        labels = [0] * 900 + list(range(1, 101))
        tree = build_tree(labels, 8)
        assert tree.num_leaves < 8
        # the zero bucket cannot split further
        assert (0, 1) in leaf_ranges(tree)

    def test_empty_labels_rejected(self):
        with pytest.raises(ValueError):
            build_tree([], 4)

    def test_non_power_of_two_budget(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 10_000, size=5000)
        tree = build_tree(labels, 96)
        assert tree.num_leaves == 96

    def test_partition_property(self):
        rng = np.random.default_rng(1)
        labels = np.concatenate([rng.poisson(3, 800), rng.integers(0, 2000, 200)])
        tree = build_tree(labels, 16)
        lo, hi = tree.root.lo, tree.root.hi
        ranges = leaf_ranges(tree)
        for y in range(lo, min(hi, lo + 100_000)):
            hits = [1 for a, b in ranges if a <= y < b]
            assert sum(hits) == 1

    def test_children_partition_parent_exactly(self):
        tree = build_tree(np.random.default_rng(2).poisson(8, 500), 16)
        for node in tree.nodes:
            if node.is_leaf:
                continue
            left, right = tree.nodes[node.left], tree.nodes[node.right]
            assert (left.lo, left.hi) == (node.lo, node.cut)
            assert (right.lo, right.hi) == (node.cut, node.hi)
            assert node.lo < node.cut < node.hi

    def test_equal_frequency_up_to_ties(self):
        rng = np.random.default_rng(3)
        labels = np.sort(rng.poisson(6, 1000))
        tree = build_tree(labels, 8)
        for node in tree.nodes:
            if node.is_leaf:
                continue
            inside = labels[(labels >= node.lo) & (labels < node.hi)]
            n_left = int((inside < node.cut).sum())
            n_right = len(inside) - n_left
            ties = int((inside == node.cut - 1).sum()) + int((inside == node.cut).sum())
            assert abs(n_left - n_right) <= max(ties, 1)


class TestPathNodes:
    def test_minimum_label_walks_leftmost(self):
        tree = build_tree(range(8), 4)
        path = path_nodes(tree, 0)
        assert [tree.nodes[p].index for p in path] == [0, 1, 3]

    def test_third_leaf_ancestry(self):
        tree = build_tree(range(8), 4)
        path = path_nodes(tree, 5)  # third leaf range [4, 6)
        assert [tree.nodes[p].lo for p in path] == [0, 4, 4]
        assert all(tree.nodes[p].lo <= 5 < tree.nodes[p].hi for p in path)
        assert len(path) == 3

    def test_out_of_range_clips_with_warning(self, caplog):
        tree = build_tree(range(8), 4)
        with caplog.at_level(logging.WARNING):
            path = path_nodes(tree, 8)  # == root hi, outside the half-open range
        leaf = tree.nodes[path[-1]]
        assert (leaf.lo, leaf.hi) == (6, 8)
        assert any("clipped" in r.message for r in caplog.records)


class TestKernelPieces:
    def test_psi_zero_at_cutoff(self):
        assert psi(10, 10) == 0.0

    def test_psi_direct_value(self):
        assert np.isclose(psi(20, 10, eps=1e-6), 0.5, atol=1e-6)

    def test_psi_explodes_at_zero_label(self):
        assert np.isclose(psi(0, 10, eps=1e-6), 1e7)

    def test_h_at_zero(self):
        assert h_map(0.0) == 1.0

    def test_h_direct_value(self):
        assert np.isclose(h_map(0.1, 10.0), np.exp(-1.0))

    def test_h_underflows_cleanly(self):
        assert h_map(10.0, 10.0) < 1e-12  # ~3.7e-44

    def test_h_rejects_negative_distance(self):
        with pytest.raises(ValueError):
            h_map(-0.1)


class TestSoftLabels:
    def setup_method(self):
        self.tree = build_tree(range(8), 4)

    def test_label_at_cutoff_saturates_both_sides(self):
        # y == cut: right side contains y, left side has zero distance too.
        entries = soft_labels(self.tree, 4)
        root = entries[0]
        assert root.p_left == 1.0 and root.p_right == 1.0
        assert root.left_kind == root.right_kind == "classification"

    def test_deep_inside_left_far_from_cut(self):
        kernel = SmoothingKernel(sharpness=10.0)
        entries = soft_labels(self.tree, 0, kernel)
        root = entries[0]
        assert root.p_left == 1.0
        assert root.p_right == 0.0  # psi(0, 4) ~ 4e6, underflow-floored
        assert root.right_kind == "classification"

    def test_containing_side_always_one(self):
        rng = np.random.default_rng(0)
        tree = build_tree(rng.poisson(20, 2000), 16)
        for raw in rng.choice(2000, 50):
            y = tree.clip_label(float(raw % 60))
            for e in soft_labels(tree, y):
                node = tree.nodes[e.position]
                containing = e.p_left if node.lo <= y < node.cut else e.p_right
                assert containing == 1.0

    def test_continuity_approaching_cut_from_left(self):
        # p_right(m - delta) climbs monotonically to 1 as delta -> 0.
        tree = self.tree
        m = tree.root.cut  # 4
        values = []
        for delta in (1.0, 0.1, 0.01):
            entries = soft_labels(tree, m - delta)
            values.append(entries[0].p_right)
        assert values[0] < values[1] < values[2] < 1.0
        assert np.isclose(values[2], 1.0, atol=0.05)

    def test_sharp_kernel_recovers_hard_labels_for_small_counts(self):
        # For labels <= 36 every off-side distance has psi >= 1/37, so at
        # sharpness 1000 the off side underflows to an exact 0 target.
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 30, size=500)
        tree = build_tree(labels, 8)
        sharp = SmoothingKernel(sharpness=1000.0)
        for y in np.unique(labels):
            soft = soft_labels(tree, int(y), sharp)
            hard = hard_labels(tree, int(y))
            for s, h in zip(soft, hard):
                if s.p_left == s.p_right == 1.0:  # exact-tie node, by design
                    continue
                assert (s.p_left, s.p_right) == (h.p_left, h.p_right)
                assert s.left_kind == s.right_kind == "classification"

    @given(st.integers(1, 200), st.floats(0.01, 0.99))
    @settings(max_examples=60, deadline=None)
    def test_off_side_label_decays_with_sharpness(self, m, frac):
        y = m * frac  # strictly left of the cutoff, psi > 0
        d = psi(y, m)
        assert h_map(d, 1000.0) <= h_map(d, 10.0)
        assert h_map(d, 1e7) < 1e-12


class TestLeafExpectations:
    def test_singleton_leaf(self):
        # cut = smallest integer with count(< m) >= half = 4
        tree = build_tree([3, 3, 3, 7], 2)
        assert leaf_ranges(tree) == [(3, 4), (4, 8)]
        assert [tree.nodes[int(p)].expect for p in tree.leaf_positions] == [3.0, 7.0]

    def test_distinct_mean_of_two_values(self):
        # leaf [0, 2) holding distinct values {0, 1} averages to 0.5
        tree = build_tree([0, 0, 0, 1, 2, 3], 2)
        vals = leaf_expectations(tree, [0, 0, 0, 1, 2, 3])
        first = tree.nodes[tree.leaf_positions[0]]
        assert (first.lo, first.hi) == (0, 1) or np.isclose(vals[0], 0.5)

    def test_tail_leaf_distinct_mean(self):
        labels = [100, 200, 33492]
        tree = BucketTree.from_dict({
            "depth": 0,
            "nodes": [[0, 100, 33493, 0, -1, -1, -1, float("nan")]],
        })
        vals = leaf_expectations(tree, labels)
        assert vals[0] == 11264.0

    def test_multiset_mode_weights_duplicates(self):
        tree = BucketTree.from_dict({
            "depth": 0,
            "nodes": [[0, 0, 3, 0, -1, -1, -1, float("nan")]],
        })
        assert leaf_expectations(tree, [0, 0, 0, 2], "multiset-mean")[0] == 0.5
        assert leaf_expectations(tree, [0, 0, 0, 2], "distinct-mean")[0] == 1.0

    def test_empty_leaf_rejected(self):
        tree = BucketTree.from_dict({
            "depth": 0,
            "nodes": [[0, 0, 10, 0, -1, -1, -1, float("nan")]],
        })
        with pytest.raises(ValueError):
            leaf_expectations(tree, [20, 30])


def test_serialization_round_trip():
    tree = build_tree(np.random.default_rng(0).poisson(10, 1000), 16)
    clone = BucketTree.from_dict(tree.to_dict())
    assert leaf_ranges(clone) == leaf_ranges(tree)
    assert np.array_equal(clone.leaf_expectations(), tree.leaf_expectations())
    assert clone.depth == tree.depth
    assert [n.cut for n in clone.nodes] == [n.cut for n in tree.nodes]
