"""Decoding hierarchical logits and lifting flat predictions into the tree.

Argmax ties resolve to the lowest class id everywhere (``np.argmax``
semantics).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import LabelHierarchy
from .objective import _as_logits, softmax_full


@dataclass(frozen=True)
class HierPrediction:
    class_id: int
    level: int
    confidence: float
    leaf_argmax: int


@dataclass
class PredictionArrays:
    """Batch form of :class:`HierPrediction`, one entry per point."""

    class_id: np.ndarray
    level: np.ndarray
    confidence: np.ndarray
    leaf_argmax: np.ndarray

    def __len__(self) -> int:
        return len(self.class_id)

    def __getitem__(self, i: int) -> HierPrediction:
        return HierPrediction(
            int(self.class_id[i]), int(self.level[i]), float(self.confidence[i]), int(self.leaf_argmax[i])
        )


def _leaf_probs(x, h: LabelHierarchy, renormalize: bool) -> np.ndarray:
    x = _as_logits(x)
    n = h.leaf_count
    if x.shape[-1] not in (n, len(h)):
        raise ValueError(f"logit length {x.shape[-1]} matches neither n={n} nor |classes|={len(h)}")
    p = softmax_full(x)[..., :n]
    if renormalize:
        p = p / p.sum(axis=-1, keepdims=True)
    return p


def leaf_entropy_confidence(x, h: LabelHierarchy, renormalize: bool = True):
    """One minus the normalized entropy of the leaf probabilities.

    ``x`` may hold logits over all classes or over the leaves only (flat
    models). With ``renormalize`` the leaf slice of the softmax is rescaled
    to sum to one first; otherwise the raw slice is used as is.
    """
    n = h.leaf_count
    if n < 2:
        raise ValueError("entropy confidence needs at least two leaves")
    p = _leaf_probs(x, h, renormalize)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    ent = -plogp.sum(axis=-1)
    return np.clip(1.0 - ent / np.log(n), 0.0, 1.0)


def maxprob_confidence(x, h: LabelHierarchy):
    """Largest renormalized leaf probability."""
    return _leaf_probs(x, h, renormalize=True).max(axis=-1)


def confidence(x, h: LabelHierarchy, kind: str = "entropy"):
    if kind == "entropy":
        return leaf_entropy_confidence(x, h)
    if kind == "maxprob":
        return maxprob_confidence(x, h)
    raise ValueError(f"unknown confidence kind {kind!r}")


def decode_batch(x, h: LabelHierarchy, conf_kind: str = "entropy") -> PredictionArrays:
    x = _as_logits(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != len(h):
        raise ValueError(f"expected {len(h)} logits per point, got {x.shape[-1]}")
    # softmax is monotone, argmax of logits == argmax of probabilities
    cls = np.argmax(x, axis=-1)
    return PredictionArrays(
        class_id=cls,
        level=h.levels[cls],
        confidence=confidence(x, h, conf_kind),
        leaf_argmax=np.argmax(x[:, : h.leaf_count], axis=-1),
    )


def decode(x, h: LabelHierarchy) -> HierPrediction:
    """Hierarchy-wide argmax with leaf-entropy confidence for one point."""
    x = _as_logits(x)
    if x.ndim != 1:
        raise ValueError("decode takes a single logit vector; use decode_batch")
    return decode_batch(x, h)[0]


def lift_level(conf, height: int):
    """Target level for a flat prediction: ``height - 1 - floor(conf * height)``, clamped."""
    conf = np.asarray(conf, dtype=np.float64)
    if np.any((conf < 0) | (conf > 1)) or np.any(np.isnan(conf)):
        raise ValueError("confidence must lie in [0, 1]")
    lvl = height - 1 - np.floor(conf * height).astype(np.int64)
    return np.clip(lvl, 0, height - 1)


def lift_flat_batch(x, h: LabelHierarchy, conf) -> PredictionArrays:
    """Lift flat leaf predictions to the ancestor chosen by confidence thresholds."""
    x = _as_logits(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != h.leaf_count:
        raise ValueError(f"expected {h.leaf_count} leaf logits per point, got {x.shape[-1]}")
    conf = np.broadcast_to(np.asarray(conf, dtype=np.float64), x.shape[:1])
    lvl = lift_level(conf, h.height)
    leaf = np.argmax(x, axis=-1)
    cls = h.ancestor_table[leaf, lvl]
    return PredictionArrays(class_id=cls, level=lvl, confidence=np.array(conf), leaf_argmax=leaf)


def lift_flat(x, h: LabelHierarchy, conf: float) -> HierPrediction:
    x = _as_logits(x)
    if x.ndim != 1:
        raise ValueError("lift_flat takes a single logit vector; use lift_flat_batch")
    return lift_flat_batch(x, h, conf)[0]
