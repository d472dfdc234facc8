"""Bucket classification head: per-edge predictors, smoothed loss, expectation inference.

Every non-leaf node owns a (left, right) pair of edge predictors realized as two
sigmoid outputs of one shared head layer. Training fits the soft labels produced
by the tree module: cross-entropy where the target is exactly 0 or 1, squared
error otherwise, summed over the nodes on the sample's root-to-leaf path only.
Inference normalizes each pair into a conditional, cascades the conditionals
into leaf weights, and returns the weighted sum of leaf expectations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import sigmoid
from .tree import BucketTree, SmoothingKernel, hard_labels, soft_labels

CE_CLAMP = 1e-7
PAIR_SUM_FLOOR = 1e-12  # degenerate guard for p_left + p_right


@dataclass
class PathTargets:
    """Per-sample training targets gathered along tree paths, padded to max depth.

    slots[i, d] is the edge-head slot of the d-th non-leaf path node of sample i
    (-1 past the end of the path). Kind masks mark regression (MSE) sides; the
    rest are classification (CE) sides.
    """

    slots: np.ndarray  # [N, D] int64
    t_left: np.ndarray  # [N, D] float64
    t_right: np.ndarray
    reg_left: np.ndarray  # [N, D] bool
    reg_right: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.slots >= 0

    def take(self, idx: np.ndarray) -> "PathTargets":
        return PathTargets(self.slots[idx], self.t_left[idx], self.t_right[idx],
                           self.reg_left[idx], self.reg_right[idx])


def path_targets(
    tree: BucketTree,
    labels: np.ndarray,
    kernel: SmoothingKernel = SmoothingKernel(),
    smoothing: bool = True,
) -> PathTargets:
    """Precomputes targets for a whole label array (cached per distinct label)."""
    labels = np.asarray(labels)
    depth = max(tree.depth, 1)
    n = len(labels)
    slots = np.full((n, depth), -1, dtype=np.int64)
    t_l = np.zeros((n, depth))
    t_r = np.zeros((n, depth))
    reg_l = np.zeros((n, depth), dtype=bool)
    reg_r = np.zeros((n, depth), dtype=bool)
    cache: dict = {}
    for i, y in enumerate(labels):
        key = float(y)
        if key not in cache:
            entries = soft_labels(tree, key, kernel) if smoothing else hard_labels(tree, key)
            cache[key] = (
                np.array([tree.edge_slot[e.position] for e in entries], dtype=np.int64),
                np.array([e.p_left for e in entries]),
                np.array([e.p_right for e in entries]),
                np.array([e.left_kind == "regression" for e in entries]),
                np.array([e.right_kind == "regression" for e in entries]),
            )
        s, tl, tr, rl, rr = cache[key]
        d = len(s)
        slots[i, :d] = s
        t_l[i, :d] = tl
        t_r[i, :d] = tr
        reg_l[i, :d] = rl
        reg_r[i, :d] = rr
    return PathTargets(slots, t_l, t_r, reg_l, reg_r)


def edge_probabilities(logits: np.ndarray) -> np.ndarray:
    """Sigmoid-squashed (left, right) pairs, shape [..., num_nonleaf, 2]."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] % 2:
        raise ValueError("edge logits must pair up (2 per non-leaf node)")
    return sigmoid(logits).reshape(*logits.shape[:-1], -1, 2)


def _side_loss_grad(p: np.ndarray, t: np.ndarray, reg: np.ndarray, valid: np.ndarray):
    pc = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    ce = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    mse = (t - p) ** 2
    loss = np.where(reg, mse, ce) * valid
    inside = (p > CE_CLAMP) & (p < 1.0 - CE_CLAMP)
    d_ce = np.where(inside, p - t, 0.0)
    d_mse = 2.0 * (p - t) * p * (1.0 - p)
    return loss, np.where(reg, d_mse, d_ce) * valid


def bcms_loss(logits: np.ndarray, targets: PathTargets) -> tuple[float, np.ndarray]:
    """Mean-over-batch path loss and its gradient w.r.t. the raw edge logits.

    Returns (loss, d_logits) with d_logits shaped like logits [B, 2 * num_nonleaf].
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    batch = logits.shape[0]
    valid = targets.mask
    safe = np.where(valid, targets.slots, 0)
    rows = np.arange(batch)[:, None]
    l_cols = 2 * safe
    r_cols = 2 * safe + 1
    p_l = sigmoid(logits[rows, l_cols])
    p_r = sigmoid(logits[rows, r_cols])
    loss_l, d_l = _side_loss_grad(p_l, targets.t_left, targets.reg_left, valid)
    loss_r, d_r = _side_loss_grad(p_r, targets.t_right, targets.reg_right, valid)
    loss = float((loss_l.sum() + loss_r.sum()) / batch)
    d_logits = np.zeros_like(logits)
    np.add.at(d_logits, (rows, l_cols), d_l / batch)
    np.add.at(d_logits, (rows, r_cols), d_r / batch)
    return loss, d_logits


def _tree_arrays(tree: BucketTree):
    n = len(tree.nodes)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    slot = np.full(n, -1, dtype=np.int64)
    for pos, node in enumerate(tree.nodes):
        if not node.is_leaf:
            left[pos] = node.left
            right[pos] = node.right
            slot[pos] = tree.edge_slot[pos]
    return left, right, slot


def conditional_left(probs: np.ndarray) -> np.ndarray:
    """p(left | node) = p_l / (p_l + p_r); degenerate pairs fall back to 0.5."""
    s = probs[..., 0] + probs[..., 1]
    return np.where(s < PAIR_SUM_FLOOR, 0.5, probs[..., 0] / np.maximum(s, PAIR_SUM_FLOOR))


@dataclass
class BcmsPrediction:
    y_f: np.ndarray  # [B]
    leaf_weights: np.ndarray  # [B, num_leaves]
    node_weights: np.ndarray  # [B, num_nodes] root-path products
    cond_left: np.ndarray  # [B, num_nonleaf]


def infer_yf(tree: BucketTree, probs: np.ndarray) -> BcmsPrediction:
    """Expectation inference: leaf weights are path products of conditionals."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[None]
    batch = probs.shape[0]
    left, right, slot = _tree_arrays(tree)
    cond = conditional_left(probs)
    w = np.zeros((batch, len(tree.nodes)))
    w[:, 0] = 1.0
    for pos in range(len(tree.nodes)):  # creation order puts parents first
        s = slot[pos]
        if s < 0:
            continue
        w[:, left[pos]] = w[:, pos] * cond[:, s]
        w[:, right[pos]] = w[:, pos] * (1.0 - cond[:, s])
    leaf_w = w[:, tree.leaf_positions]
    y_f = leaf_w @ tree.leaf_expectations()
    return BcmsPrediction(y_f=y_f, leaf_weights=leaf_w, node_weights=w, cond_left=cond)


def subtree_expectations(tree: BucketTree, cond: np.ndarray) -> np.ndarray:
    """Per-node expected value of the subtree below it, [B, num_nodes]."""
    left, right, slot = _tree_arrays(tree)
    batch = cond.shape[0]
    s_val = np.zeros((batch, len(tree.nodes)))
    for pos in range(len(tree.nodes) - 1, -1, -1):
        s = slot[pos]
        if s < 0:
            s_val[:, pos] = tree.nodes[pos].expect
        else:
            s_val[:, pos] = cond[:, s] * s_val[:, left[pos]] + (1.0 - cond[:, s]) * s_val[:, right[pos]]
    return s_val


def yf_logits_grad(tree: BucketTree, probs: np.ndarray, pred: BcmsPrediction,
                   d_yf: np.ndarray) -> np.ndarray:
    """Backpropagates d loss/d y_f into the raw edge logits (joint-routing mode)."""
    batch = probs.shape[0]
    left, right, slot = _tree_arrays(tree)
    s_val = subtree_expectations(tree, pred.cond_left)
    nonleaf = tree.nonleaf_positions
    gap = s_val[:, left[nonleaf]] - s_val[:, right[nonleaf]]  # [B, S]
    d_cond = d_yf[:, None] * pred.node_weights[:, nonleaf] * gap
    p_l = probs[:, :, 0]
    p_r = probs[:, :, 1]
    total = p_l + p_r
    ok = total >= PAIR_SUM_FLOOR  # degenerate pairs are flat (cond pinned at 0.5)
    denom = np.maximum(total, PAIR_SUM_FLOOR) ** 2
    d_pl = np.where(ok, d_cond * p_r / denom, 0.0)
    d_pr = np.where(ok, -d_cond * p_l / denom, 0.0)
    d_logits = np.empty((batch, 2 * tree.num_nonleaf))
    d_logits[:, 0::2] = d_pl * p_l * (1.0 - p_l)
    d_logits[:, 1::2] = d_pr * p_r * (1.0 - p_r)
    return d_logits
