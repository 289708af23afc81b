"""Softmax over the whole hierarchy and the hierarchical cross entropy.

All functions take logits with the class axis last and work on a single
vector or a batch of rows. Losses are per row; reduce them yourself.

The hierarchical loss is ``-sum_c exp(eta_c) * log p_c`` with ``p`` the
softmax over all classes. Its gradient w.r.t. the logits is
``p * W - exp(eta)`` with ``W = sum_c exp(eta_c)``, so the unconstrained
minimizer is ``p = exp(eta) / W``.
"""

from __future__ import annotations

import numpy as np

from .encoding import HierTarget


def _as_logits(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    return x


def _as_eta(t) -> np.ndarray:
    return t.eta if isinstance(t, HierTarget) else np.asarray(t, dtype=np.float64)


def log_softmax(x) -> np.ndarray:
    x = _as_logits(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_full(x) -> np.ndarray:
    x = _as_logits(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def hce_loss(x, t) -> float | np.ndarray:
    eta = _as_eta(t)
    x = _as_logits(x)
    if x.shape[-1] != eta.shape[-1]:
        raise ValueError(f"logit length {x.shape[-1]} != target length {eta.shape[-1]}")
    return -(np.exp(eta) * log_softmax(x)).sum(axis=-1)


def hce_grad(x, t) -> np.ndarray:
    eta = _as_eta(t)
    x = _as_logits(x)
    if x.shape[-1] != eta.shape[-1]:
        raise ValueError(f"logit length {x.shape[-1]} != target length {eta.shape[-1]}")
    w = np.exp(eta)
    return softmax_full(x) * w.sum(axis=-1, keepdims=True) - w


def hce_minimizer(t) -> np.ndarray:
    """Closed-form probability vector that minimizes the loss for target ``t``."""
    w = np.exp(_as_eta(t))
    return w / w.sum(axis=-1, keepdims=True)


def hce_min_value(t) -> float | np.ndarray:
    """Loss value at :func:`hce_minimizer`: ``W log W - sum_c exp(eta_c) eta_c``."""
    eta = _as_eta(t)
    w = np.exp(eta)
    total = w.sum(axis=-1)
    return total * np.log(total) - (w * eta).sum(axis=-1)


def _check_flat(x, leaf):
    x = _as_logits(x)
    leaf = np.asarray(leaf, dtype=np.int64)
    if leaf.shape != x.shape[:-1]:
        raise ValueError(f"label shape {leaf.shape} does not match logits {x.shape}")
    n = x.shape[-1]
    if np.any((leaf < 0) | (leaf >= n)):
        raise ValueError(f"labels must be leaf ids in [0, {n})")
    return x, leaf


def ce_loss_flat(x, leaf) -> float | np.ndarray:
    """Plain cross entropy over leaf logits, ``-log softmax(x)[leaf]``."""
    x, leaf = _check_flat(x, leaf)
    lp = log_softmax(x)
    return -np.take_along_axis(lp, leaf[..., None], axis=-1)[..., 0]


def ce_grad_flat(x, leaf) -> np.ndarray:
    x, leaf = _check_flat(x, leaf)
    g = softmax_full(x)
    np.put_along_axis(g, leaf[..., None], np.take_along_axis(g, leaf[..., None], axis=-1) - 1.0, axis=-1)
    return g
