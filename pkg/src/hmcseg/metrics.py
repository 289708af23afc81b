"""Segmentation and calibration metrics for hierarchical predictions.

Counting rules for a point with ground-truth leaf ``s`` and predicted node ``v``:

* ``v == s``: TP for ``s``.
* ``v`` another leaf: FN for ``s`` and FP for ``v``.
* ``v`` a superclass: FN for ``s``; if ``v`` lies on ``s``'s root path it is
  also a true superclass, ``TS_s(level(v))``. No FP is charged anywhere.

``hIoU_s = (TP_s + sum_l alpha**l * TS_s(l)) / (TP_s + FP_s + FN_s)``.
Class means skip classes with an empty denominator (absent from ground
truth and predictions). Ground-truth ids below zero mark ignored points.

CER and uIoU are reconstructions: CER counts points whose prediction
asserts a branch at a chosen tier (default 2, static/dynamic) that
contradicts the ground truth; uIoU treats points below a confidence
threshold as invalid, drops the wrong ones and charges the right ones as FN.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .hierarchy import LabelHierarchy
from .inference import (
    HierPrediction,
    PredictionArrays,
    _leaf_probs,
    confidence,
    lift_flat_batch,
)
from .objective import _as_logits

DEFAULT_ALPHA_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 12))
DEFAULT_FRACTION_GRID = tuple(np.round(np.linspace(0.0, 1.0, 21), 12))
DEFAULT_THETA_GRID = DEFAULT_FRACTION_GRID
DEFAULT_ECE_BINS = 15


class ClassScores(NamedTuple):
    per_class: np.ndarray  # nan for excluded classes
    mean: float


@dataclass
class HierTally:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    ts: np.ndarray  # (n, height); column l counts true superclasses at level l, column 0 unused
    total_points: int = 0

    @classmethod
    def empty(cls, h: LabelHierarchy) -> "HierTally":
        n = h.leaf_count
        z = lambda: np.zeros(n, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), np.zeros((n, h.height), dtype=np.int64), 0)

    def __add__(self, other: "HierTally") -> "HierTally":
        if self.ts.shape != other.ts.shape:
            raise ValueError("cannot merge tallies from different hierarchies")
        return HierTally(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.ts + other.ts,
            self.total_points + other.total_points,
        )

    @property
    def denominator(self) -> np.ndarray:
        return self.tp + self.fp + self.fn


def _node_ids(preds) -> np.ndarray:
    if isinstance(preds, PredictionArrays):
        return np.asarray(preds.class_id, dtype=np.int64)
    if len(preds) and isinstance(preds[0], HierPrediction):
        return np.array([p.class_id for p in preds], dtype=np.int64)
    return np.asarray(preds, dtype=np.int64)


def _check_inputs(pred, gts, h: LabelHierarchy):
    pred = _node_ids(pred).ravel()
    gts = np.asarray(gts, dtype=np.int64).ravel()
    if pred.shape != gts.shape:
        raise ValueError(f"{pred.size} predictions for {gts.size} ground-truth labels")
    if np.any(gts >= h.leaf_count):
        raise ValueError("ground-truth ids must be leaves")
    valid = gts >= 0
    pred, gts = pred[valid], gts[valid]
    if np.any((pred < 0) | (pred >= len(h))):
        raise ValueError("prediction refers to an unknown class id")
    return pred, gts


def tally(preds, gts, h: LabelHierarchy) -> HierTally:
    pred, gts = _check_inputs(preds, gts, h)
    n = h.leaf_count
    lvl = h.levels[pred]
    hit = pred == gts
    wrong_leaf = (lvl == 0) & ~hit
    ts = np.zeros((n, h.height), dtype=np.int64)
    sup = lvl > 0
    true_sup = sup & (h.ancestor_table[gts, lvl] == pred)
    np.add.at(ts, (gts[true_sup], lvl[true_sup]), 1)
    return HierTally(
        tp=np.bincount(gts[hit], minlength=n),
        fp=np.bincount(pred[wrong_leaf], minlength=n),
        fn=np.bincount(gts[~hit], minlength=n),
        ts=ts,
        total_points=int(gts.size),
    )


def _class_mean(num: np.ndarray, den: np.ndarray) -> ClassScores:
    per = np.full(num.shape, np.nan)
    ok = den > 0
    per[ok] = num[ok] / den[ok]
    mean = float(per[ok].mean()) if ok.any() else math.nan
    return ClassScores(per, mean)


def hiou(t: HierTally, alpha: float) -> ClassScores:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    height = t.ts.shape[1]
    # alpha**l for l >= 1 only, so alpha=0 removes all superclass credit
    weights = np.array([0.0] + [alpha**l for l in range(1, height)])
    return _class_mean(t.tp + t.ts @ weights, t.denominator)


def miou(t: HierTally) -> ClassScores:
    return _class_mean(t.tp.astype(np.float64), t.denominator)


def cer(preds, gts, h: LabelHierarchy, tier: int = 2) -> float:
    """Fraction of labeled points whose prediction contradicts the tier-level branch."""
    if not 0 <= tier < h.height:
        raise ValueError(f"hierarchy of height {h.height} has no level-{tier} tier")
    pred, gts = _check_inputs(preds, gts, h)
    if gts.size == 0:
        return 0.0
    asserts = h.levels[pred] <= tier
    anc = h.ancestor_table
    critical = asserts & (anc[pred, tier] != anc[gts, tier])
    return float(critical.sum() / gts.size)


def ece(conf, correct, bins: int = DEFAULT_ECE_BINS):
    """Expected calibration error with equal-width bins.

    Returns ``(ece, curve)`` where ``curve`` has one row per non-empty bin:
    ``(bin center, accuracy, mean confidence, count)``.
    """
    conf = np.asarray(conf, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("ece needs at least one prediction")
    if conf.shape != correct.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    count = np.bincount(idx, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    used = count > 0
    acc = acc_sum[used] / count[used]
    mean_conf = conf_sum[used] / count[used]
    value = float(np.sum(count[used] / conf.size * np.abs(acc - mean_conf)))
    centers = (np.arange(bins) + 0.5) / bins
    curve = np.column_stack([centers[used], acc, mean_conf, count[used]])
    return value, curve


def brier_scores(leaf_probs, gts) -> np.ndarray:
    """Per-point multiclass Brier score halved into [0, 1]."""
    p = np.asarray(leaf_probs, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.int64)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(gts)), gts] = 1.0
    return 0.5 * ((p - onehot) ** 2).sum(axis=-1)


def _removal_order(key, rng) -> np.ndarray:
    """Indices sorted by ``key`` ascending, ties in random order."""
    tiebreak = rng.permutation(len(key))
    return np.lexsort((tiebreak, key))


def _fraction_counts(grid, n: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if np.any((grid < 0) | (grid > 1)):
        raise ValueError("sparsification fractions must lie in [0, 1]")
    return np.rint(grid * n).astype(np.int64)


class Sparsification(NamedTuple):
    ause: float
    fractions: np.ndarray
    model: np.ndarray
    oracle: np.ndarray


def _mean_tail(values: np.ndarray, order: np.ndarray, ks: np.ndarray) -> np.ndarray:
    # mean of values[order[k:]] for each k; empty tail -> 0
    ordered = values[order]
    tail_sum = np.concatenate([np.cumsum(ordered[::-1])[::-1], [0.0]])
    remaining = len(values) - ks
    out = np.zeros(len(ks))
    nz = remaining > 0
    out[nz] = tail_sum[ks[nz]] / remaining[nz]
    return out


def ause(conf, errors, grid=DEFAULT_FRACTION_GRID, seed: int = 0) -> Sparsification:
    """Area between model and oracle sparsification curves of per-point errors.

    The model curve drops the lowest-confidence fraction first, the oracle
    drops the highest-error fraction first; the remaining mean error is
    evaluated at each fraction and the gap integrated with the trapezoid rule.
    """
    conf = np.asarray(conf, dtype=np.float64).ravel()
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if conf.shape != errors.shape:
        raise ValueError("confidences and errors differ in length")
    rng = np.random.default_rng(seed)
    grid = np.asarray(grid, dtype=np.float64)
    ks = _fraction_counts(grid, conf.size)
    model = _mean_tail(errors, _removal_order(conf, rng), ks)
    oracle = _mean_tail(errors, _removal_order(-errors, rng), ks)
    return Sparsification(float(np.trapezoid(model - oracle, grid)), grid, model, oracle)


def _flat_miou(pred, gts, n: int) -> float:
    hit = pred == gts
    tp = np.bincount(gts[hit], minlength=n)
    fp = np.bincount(pred[~hit], minlength=n)
    fn = np.bincount(gts[~hit], minlength=n)
    return _class_mean(tp.astype(np.float64), tp + fp + fn).mean


def ause_miou(conf, leaf_pred, gts, h: LabelHierarchy, grid=DEFAULT_FRACTION_GRID, seed: int = 0) -> Sparsification:
    """Sparsification with ``1 - mIoU`` of the retained points as the error.

    The oracle drops wrong predictions first.
    """
    conf = np.asarray(conf, dtype=np.float64).ravel()
    leaf_pred = np.asarray(leaf_pred, dtype=np.int64).ravel()
    gts = np.asarray(gts, dtype=np.int64).ravel()
    keep = gts >= 0
    conf, leaf_pred, gts = conf[keep], leaf_pred[keep], gts[keep]
    rng = np.random.default_rng(seed)
    grid = np.asarray(grid, dtype=np.float64)
    ks = _fraction_counts(grid, gts.size)
    wrong = (leaf_pred != gts).astype(np.float64)
    curves = []
    for order in (_removal_order(conf, rng), _removal_order(-wrong, rng)):
        vals = []
        for k in ks:
            rest = order[k:]
            vals.append(0.0 if rest.size == 0 else 1.0 - _flat_miou(leaf_pred[rest], gts[rest], h.leaf_count))
        curves.append(np.array(vals))
    model, oracle = curves
    return Sparsification(float(np.trapezoid(model - oracle, grid)), grid, model, oracle)


class UIoU(NamedTuple):
    uiou: float
    thetas: np.ndarray
    curve: np.ndarray


def uiou(conf, leaf_pred, gts, h: LabelHierarchy, grid=DEFAULT_THETA_GRID) -> UIoU:
    """IoU with low-confidence points treated as invalid, averaged over thresholds.

    At threshold ``theta`` a point is invalid when its confidence is below
    ``theta``. Invalid wrong predictions (true invalids) are dropped, invalid
    right predictions (false invalids) count as FN for their class.
    """
    conf = np.asarray(conf, dtype=np.float64).ravel()
    valid = np.asarray(gts, dtype=np.int64).ravel() >= 0
    if conf.shape != valid.shape:
        raise ValueError("confidences and labels differ in length")
    pred, gts = _check_inputs(leaf_pred, gts, h)
    if np.any(h.levels[pred] > 0):
        raise ValueError("uIoU takes leaf predictions")
    conf = conf[valid]
    return _uiou(conf, pred, gts, h.leaf_count, np.asarray(grid, dtype=np.float64))


def _uiou(conf, pred, gts, n, grid) -> UIoU:
    right = pred == gts
    vals = []
    for theta in grid:
        valid = conf >= theta
        tp = np.bincount(gts[valid & right], minlength=n)
        fp = np.bincount(pred[valid & ~right], minlength=n)
        fn = np.bincount(gts[~right & valid], minlength=n) + np.bincount(gts[~valid & right], minlength=n)
        m = _class_mean(tp.astype(np.float64), tp + fp + fn).mean
        vals.append(0.0 if math.isnan(m) else m)
    curve = np.array(vals)
    return UIoU(float(curve.mean()) if curve.size else 0.0, grid, curve)


@dataclass
class MetricReport:
    scalars: dict[str, float] = field(default_factory=dict)
    grids: dict[str, list[float]] = field(default_factory=dict)
    per_class: dict[str, list[float | None]] = field(default_factory=dict)
    curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        return {
            "scalars": {k: clean(float(v)) for k, v in self.scalars.items()},
            "grids": {k: [float(x) for x in v] for k, v in self.grids.items()},
            "per_class": {k: [clean(float(x)) for x in v] for k, v in self.per_class.items()},
            "curves": {k: {c: [float(x) for x in col] for c, col in v.items()} for k, v in self.curves.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hiou_series(self) -> list[tuple[float, float]]:
        return [(a, self.scalars[f"hIoU@{a:g}"]) for a in self.grids["alpha"]]


def evaluate(
    logits,
    gts,
    h: LabelHierarchy,
    *,
    pred=None,
    conf=None,
    alpha_grid=DEFAULT_ALPHA_GRID,
    ece_bins: int = DEFAULT_ECE_BINS,
    fraction_grid=DEFAULT_FRACTION_GRID,
    theta_grid=DEFAULT_THETA_GRID,
    cer_tier: int = 2,
    conf_kind: str = "entropy",
    seed: int = 0,
) -> MetricReport:
    """Full metric suite for one set of predictions.

    ``logits`` over all classes are decoded with the hierarchy-wide argmax;
    logits over the leaves only are lifted with the confidence thresholds.
    ``pred`` overrides the hierarchical prediction, ``conf`` the confidence.
    mIoU, ECE, AUSE and uIoU use the leaf argmax; hIoU and CER use the
    hierarchical prediction.
    """
    logits = _as_logits(logits)
    gts = np.asarray(gts, dtype=np.int64).ravel()
    if logits.ndim != 2 or logits.shape[0] != gts.size:
        raise ValueError(f"logits shape {logits.shape} does not match {gts.size} labels")
    if conf is None:
        conf = confidence(logits, h, conf_kind)
    conf = np.asarray(conf, dtype=np.float64).ravel()
    probs = _leaf_probs(logits, h, renormalize=True)
    leaf_pred = probs.argmax(axis=-1)
    if pred is None:
        if logits.shape[1] == len(h):
            pred = logits.argmax(axis=-1)
        else:
            pred = lift_flat_batch(logits, h, conf).class_id
    pred = _node_ids(pred)

    valid = gts >= 0
    g, c, lp = gts[valid], conf[valid], leaf_pred[valid]

    rep = MetricReport()
    flat = miou(tally(leaf_pred, gts, h))
    rep.scalars["mIoU"] = flat.mean
    rep.per_class["IoU"] = list(flat.per_class)
    ht = tally(pred, gts, h)
    rep.grids["alpha"] = [float(a) for a in alpha_grid]
    for a in alpha_grid:
        s = hiou(ht, float(a))
        rep.scalars[f"hIoU@{a:g}"] = s.mean
        rep.per_class[f"hIoU@{a:g}"] = list(s.per_class)
    rep.scalars["CER"] = cer(pred, gts, h, cer_tier)
    rep.grids["cer_tier"] = [cer_tier]

    if g.size:
        e, rel = ece(c, lp == g, ece_bins)
        rep.scalars["ECE"] = e
        rep.curves["reliability"] = {
            "bin_center": rel[:, 0], "accuracy": rel[:, 1], "confidence": rel[:, 2], "count": rel[:, 3],
        }
        bs = ause(c, brier_scores(probs[valid], g), fraction_grid, seed)
        rep.scalars["AUSE_BS"] = bs.ause
        rep.curves["sparsification_bs"] = {"fraction": bs.fractions, "model": bs.model, "oracle": bs.oracle}
        mi = ause_miou(c, lp, g, h, fraction_grid, seed)
        rep.scalars["AUSE_mIoU"] = mi.ause
        rep.curves["sparsification_miou"] = {"fraction": mi.fractions, "model": mi.model, "oracle": mi.oracle}
        u = _uiou(c, lp, g, h.leaf_count, np.asarray(theta_grid, dtype=np.float64))
        rep.scalars["uIoU"] = u.uiou
        rep.curves["uiou_theta"] = {"theta": u.thetas, "uiou": u.curve}
    rep.grids["ece_bins"] = [ece_bins]
    rep.grids["fraction"] = [float(x) for x in fraction_grid]
    rep.grids["theta"] = [float(x) for x in theta_grid]
    return rep
