"""Weighted hierarchical ground truth.

Every class on the leaf's root path gets a nonzero weight that depends only
on its level; every other class gets 0. Two weightings are available:

``prose``
    ``(h - level) / h``: the leaf gets 1, the root gets ``1/h``.
``formula``
    ``(1 + level) / h``: the leaf gets ``1/h``, the root gets 1.

Both assign the same set of values ``{1/h, ..., h/h}``, only the direction
along the path differs. ``prose`` is the default because it is the only one
under which the loss minimizer favors the leaf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import LabelHierarchy

ETA_MODES = ("prose", "formula")


@dataclass(frozen=True)
class HierTarget:
    eta: np.ndarray
    leaf: int


def level_weights(h: LabelHierarchy, mode: str = "prose") -> np.ndarray:
    """Weight per level, indexed by level."""
    levels = np.arange(h.height, dtype=np.float64)
    if mode == "prose":
        return (h.height - levels) / h.height
    if mode == "formula":
        return (1.0 + levels) / h.height
    raise ValueError(f"unknown eta mode {mode!r}; expected one of {ETA_MODES}")


def encode_target(h: LabelHierarchy, leaf: int, mode: str = "prose") -> HierTarget:
    if not 0 <= leaf < h.leaf_count:
        raise ValueError(f"class {leaf} is not a leaf (leaf ids are 0..{h.leaf_count - 1})")
    w = level_weights(h, mode)
    eta = np.zeros(len(h), dtype=np.float64)
    path = h.ancestor_table[leaf]
    eta[path] = w
    return HierTarget(eta=eta, leaf=int(leaf))


def encode_targets(h: LabelHierarchy, leaves, mode: str = "prose") -> np.ndarray:
    """Stack of eta rows, one per leaf label.

    Negative labels (ignored points) give all-zero rows.
    """
    leaves = np.asarray(leaves, dtype=np.int64)
    if np.any(leaves >= h.leaf_count):
        bad = int(leaves[leaves >= h.leaf_count][0])
        raise ValueError(f"class {bad} is not a leaf (leaf ids are 0..{h.leaf_count - 1})")
    w = level_weights(h, mode)
    eta = np.zeros((leaves.size, len(h)), dtype=np.float64)
    valid = np.flatnonzero(leaves >= 0)
    paths = h.ancestor_table[leaves[valid]]  # (m, height)
    eta[valid[:, None], paths] = w[None, :]
    return eta


def target_weight_sum(t) -> float | np.ndarray:
    """``sum_c exp(eta_c)`` over all classes (off-path classes count 1 each)."""
    eta = t.eta if isinstance(t, HierTarget) else np.asarray(t, dtype=np.float64)
    return np.exp(eta).sum(axis=-1)
