"""Bucket tree over conversion counts: equal-frequency splits, paths, soft labels.

The tree turns count regression into a cascade of left/right bucket decisions.
Each node covers a half-open integer range [lo, hi); a non-leaf splits it at an
integer cutoff so that both sides hold (up to ties) the same number of training
samples. Labels are smoothed into non-normalized soft targets: the side that
contains the label always gets probability 1, the other side gets a probability
that decays with the relative distance of the label from the cutoff.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Soft labels below this are snapped to exact 0 and treated as classification
# targets; an MSE target indistinguishable from 0 would train nothing useful.
UNDERFLOW_FLOOR = 1e-12


@dataclass(frozen=True)
class SmoothingKernel:
    """Distance -> probability map for soft labels: h(d) = exp(-sharpness * d)."""

    eps: float = 1e-6
    sharpness: float = 10.0

    def __post_init__(self) -> None:
        if self.eps <= 0 or self.sharpness <= 0:
            raise ValueError("eps and sharpness must be positive")


def psi(y: float, m: float, eps: float = 1e-6) -> float:
    """Relative distance of label y from cutoff m: |y - m| / (y + eps)."""
    if y < 0:
        raise ValueError("labels are nonnegative")
    return abs(y - m) / (y + eps)


def h_map(d: float, k: float = 10.0) -> float:
    """Maps a nonnegative distance to a probability, h(0) = 1, decaying in d."""
    if d < 0:
        raise ValueError("distance must be nonnegative")
    # exp underflows to 0.0 for large d, which is the intended limit.
    return float(np.exp(-k * np.float64(d)))


@dataclass
class TreeNode:
    index: int  # heap index: children at 2i+1 / 2i+2
    lo: int
    hi: int  # half-open [lo, hi)
    depth: int
    cut: int | None = None  # integer cutoff, non-leaf only
    left: int | None = None  # positions into BucketTree.nodes
    right: int | None = None
    expect: float | None = None  # leaf expectation, leaf only

    @property
    def is_leaf(self) -> bool:
        return self.cut is None


@dataclass
class BucketTree:
    nodes: list[TreeNode]
    depth: int
    leaf_positions: np.ndarray = field(init=False)
    nonleaf_positions: np.ndarray = field(init=False)
    edge_slot: dict = field(init=False)  # node position -> contiguous slot for edge heads

    def __post_init__(self) -> None:
        self.leaf_positions = np.array(
            [p for p, n in enumerate(self.nodes) if n.is_leaf], dtype=np.int64
        )
        self.nonleaf_positions = np.array(
            [p for p, n in enumerate(self.nodes) if not n.is_leaf], dtype=np.int64
        )
        self.edge_slot = {int(p): s for s, p in enumerate(self.nonleaf_positions)}

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_positions)

    @property
    def num_nonleaf(self) -> int:
        return len(self.nonleaf_positions)

    def leaf_expectations(self) -> np.ndarray:
        return np.array([self.nodes[p].expect for p in self.leaf_positions])

    def clip_label(self, y: float) -> float:
        root = self.root
        if y < root.lo or y >= root.hi:
            clipped = min(max(y, root.lo), root.hi - 1)
            logger.warning("label %s outside root range [%d, %d); clipped to %s",
                           y, root.lo, root.hi, clipped)
            return clipped
        return y

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "nodes": [
                [n.index, n.lo, n.hi, n.depth,
                 -1 if n.cut is None else n.cut,
                 -1 if n.left is None else n.left,
                 -1 if n.right is None else n.right,
                 float("nan") if n.expect is None else n.expect]
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BucketTree":
        nodes = []
        for idx, lo, hi, depth, cut, left, right, expect in data["nodes"]:
            nodes.append(TreeNode(
                index=int(idx), lo=int(lo), hi=int(hi), depth=int(depth),
                cut=None if cut == -1 else int(cut),
                left=None if left == -1 else int(left),
                right=None if right == -1 else int(right),
                expect=None if math.isnan(expect) else float(expect),
            ))
        return cls(nodes=nodes, depth=int(data["depth"]))


def _equal_freq_cutoff(values: np.ndarray) -> int | None:
    """Smallest integer m with count(values < m) >= half, clamped so both sides
    stay non-empty. Returns None when the node holds a single distinct value."""
    if values[0] == values[-1]:
        return None
    n = len(values)
    half = (n + 1) // 2  # count >= n/2 over integers
    m = int(values[half - 1]) + 1
    return min(m, int(values[-1]))


def build_tree(labels: Iterable[int], num_leaves: int = 64) -> BucketTree:
    """Equal-frequency binary tree over a label multiset.

    Splits breadth-first, depth-capped at ceil(log2(num_leaves)), until the leaf
    budget is exhausted; a power-of-two budget yields a perfect tree when every
    node keeps >= 2 distinct values. Nodes that collapse to one distinct value
    become leaves early and their slots are not redistributed, so the realized
    leaf count can fall short of the budget (logged).
    """
    values = np.sort(np.asarray(list(labels), dtype=np.int64))
    if values.size == 0:
        raise ValueError("cannot build a bucket tree from an empty label set")
    if np.any(values < 0):
        raise ValueError("labels must be nonnegative counts")
    if num_leaves < 1:
        raise ValueError("num_leaves must be >= 1")
    max_depth = math.ceil(math.log2(num_leaves)) if num_leaves > 1 else 0

    lo0, hi0 = int(values[0]), int(values[-1]) + 1
    nodes = [TreeNode(index=0, lo=lo0, hi=hi0, depth=0)]
    spans = {0: (0, len(values))}  # node position -> slice of `values`
    queue = [0]  # BFS frontier of splittable leaf positions
    leaves = 1
    while queue and leaves < num_leaves:
        pos = queue.pop(0)
        node = nodes[pos]
        if node.depth >= max_depth:
            continue
        a, b = spans[pos]
        cut = _equal_freq_cutoff(values[a:b])
        if cut is None:
            continue  # single distinct value: stays a leaf
        mid = a + int(np.searchsorted(values[a:b], cut, side="left"))
        node.cut = cut
        for side, (lo, hi, s0, s1, heap) in enumerate(
            [(node.lo, cut, a, mid, 2 * node.index + 1),
             (cut, node.hi, mid, b, 2 * node.index + 2)]
        ):
            child_pos = len(nodes)
            nodes.append(TreeNode(index=heap, lo=lo, hi=hi, depth=node.depth + 1))
            spans[child_pos] = (s0, s1)
            queue.append(child_pos)
            if side == 0:
                node.left = child_pos
            else:
                node.right = child_pos
        leaves += 1

    depth = max(n.depth for n in nodes)
    tree = BucketTree(nodes=nodes, depth=depth)
    if tree.num_leaves < num_leaves:
        logger.warning("requested %d leaves but only %d distinct splits possible",
                       num_leaves, tree.num_leaves)
    _assign_leaf_expectations(tree, values, spans)
    return tree


def _assign_leaf_expectations(tree: BucketTree, values: np.ndarray, spans: dict) -> None:
    for pos in tree.leaf_positions:
        a, b = spans[int(pos)]
        if a == b:
            raise ValueError(f"leaf {pos} contains no training labels")
        tree.nodes[int(pos)].expect = _expectation(values[a:b], "distinct-mean",
                                                   tree.nodes[int(pos)])


def _expectation(leaf_values: np.ndarray, mode: str, node: TreeNode) -> float:
    if mode == "distinct-mean":
        return float(np.unique(leaf_values).mean())
    if mode == "multiset-mean":
        return float(leaf_values.mean())
    if mode == "midpoint":
        return (node.lo + node.hi) / 2.0
    raise ValueError(f"unknown leaf expectation mode {mode!r}")


def leaf_expectations(tree: BucketTree, labels: Iterable[int], mode: str = "distinct-mean") -> np.ndarray:
    """(Re)computes per-leaf expectations from a label multiset.

    Default averages the distinct label values inside each leaf range; the
    multiset mean and the range midpoint are kept for comparison runs (midpoint
    badly overestimates under long tails).
    """
    values = np.sort(np.asarray(list(labels), dtype=np.int64))
    out = np.empty(tree.num_leaves)
    for k, pos in enumerate(tree.leaf_positions):
        node = tree.nodes[int(pos)]
        inside = values[(values >= node.lo) & (values < node.hi)]
        if inside.size == 0:
            raise ValueError(f"leaf [{node.lo}, {node.hi}) holds no labels")
        out[k] = _expectation(inside, mode, node)
        node.expect = float(out[k])
    return out


def path_nodes(tree: BucketTree, y: float) -> list[int]:
    """Root-to-leaf node positions whose ranges contain y (clipped into range)."""
    y = tree.clip_label(y)
    path = []
    pos = 0
    while True:
        node = tree.nodes[pos]
        path.append(pos)
        if node.is_leaf:
            return path
        pos = node.left if y < node.cut else node.right


@dataclass(frozen=True)
class SoftLabelEntry:
    position: int  # node position in tree.nodes
    p_left: float
    p_right: float
    left_kind: str  # "classification" | "regression"
    right_kind: str


def _side_label(contains: bool, y: float, cut: int, kernel: SmoothingKernel) -> tuple[float, str]:
    if contains:
        return 1.0, "classification"
    p = h_map(psi(y, cut, kernel.eps), kernel.sharpness)
    if p < UNDERFLOW_FLOOR:
        return 0.0, "classification"
    if p >= 1.0:  # y == cut: zero distance, the off side also saturates to 1
        return 1.0, "classification"
    return p, "regression"


def soft_labels(tree: BucketTree, y: float, kernel: SmoothingKernel = SmoothingKernel()) -> list[SoftLabelEntry]:
    """Per-path-node soft targets for one label.

    The side whose range contains y gets exactly 1. The other side gets
    h(psi(y, cut)), snapped to 0 below the underflow floor. Targets in {0, 1}
    are classification (cross-entropy), anything in (0, 1) is regression (MSE).
    """
    y = tree.clip_label(y)
    entries = []
    for pos in path_nodes(tree, y):
        node = tree.nodes[pos]
        if node.is_leaf:
            continue
        in_left = node.lo <= y < node.cut
        p_l, kind_l = _side_label(in_left, y, node.cut, kernel)
        p_r, kind_r = _side_label(not in_left, y, node.cut, kernel)
        entries.append(SoftLabelEntry(pos, p_l, p_r, kind_l, kind_r))
    return entries


def hard_labels(tree: BucketTree, y: float) -> list[SoftLabelEntry]:
    """One-hot targets (no smoothing): containing side 1, other side 0, all CE."""
    y = tree.clip_label(y)
    entries = []
    for pos in path_nodes(tree, y):
        node = tree.nodes[pos]
        if node.is_leaf:
            continue
        in_left = node.lo <= y < node.cut
        entries.append(SoftLabelEntry(
            pos, 1.0 if in_left else 0.0, 0.0 if in_left else 1.0,
            "classification", "classification"))
    return entries
