"""Desk-scale training on synthetic point clouds.

Points are Gaussian blobs around per-leaf feature centers. Centers are laid
out along the hierarchy (siblings close together, cousins further apart), so
classes that share a superclass also share a region of feature space. A
configurable fraction of a class's points is drawn around the midpoint
between it and a sibling instead, which makes those points genuinely
ambiguous between the two leaves.

The classifier is a small fully-connected ReLU network written directly in
numpy with hand-derived backprop, trained with Adam and a cosine learning
rate schedule, with early stopping on validation mIoU.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .encoding import encode_targets
from .hierarchy import LabelHierarchy, builtin_semantickitti
from .inference import decode_batch, lift_flat_batch, leaf_entropy_confidence
from .metrics import MetricReport, evaluate, miou, tally
from .objective import ce_grad_flat, ce_loss_flat, hce_grad, hce_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- scenes


def default_centers(
    h: LabelHierarchy, dim: int = 4, scales=(8.0, 4.0, 1.5), seed: int = 0
) -> np.ndarray:
    """Leaf feature centers built top-down along the tree.

    A node's center is its parent's center plus ``scale`` along a direction
    of its own. Siblings take distinct axes of a random rotation (both
    signs), so with up to ``2 * dim`` children they sit orthogonally or
    opposite around the parent. ``scales`` lists the offset per level from
    just below the root down to the leaves.
    """
    if len(scales) < h.height - 1:
        raise ValueError(f"need {h.height - 1} scales, got {len(scales)}")
    rng = np.random.default_rng(seed)
    centers = np.zeros((len(h), dim))
    pending = [h.root]
    depth = 0
    while pending:
        nxt = []
        for node in pending:
            kids = h.children(node)
            if len(kids) > 2 * dim:
                raise ValueError(f"{h.name(node)!r} has more than {2 * dim} children")
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            for i, k in enumerate(kids):
                sign = 1.0 if i % 2 == 0 else -1.0
                centers[k] = centers[node] + scales[depth] * sign * q[:, i // 2]
            nxt.extend(kids)
        pending = nxt
        depth += 1
    return centers[: h.leaf_count]


def sibling_pairs(h: LabelHierarchy) -> list[tuple[int, int]]:
    """All ordered pairs of distinct leaves sharing a level-1 parent."""
    pairs = []
    for node in h.nodes_at_level(1):
        kids = h.children(node)
        pairs.extend((a, b) for a in kids for b in kids if a != b)
    return pairs


@dataclass(frozen=True)
class SceneConfig:
    points_per_class: int = 20
    feature_dim: int = 4
    centers: np.ndarray | None = None
    noise_scale: float = 0.35
    ambiguity_rate: float = 0.0
    ambiguity_pairs: tuple[tuple[int, int], ...] | None = None
    mask_classes: tuple[int, ...] = ()
    seed: int = 0

    def validate(self, h: LabelHierarchy) -> None:
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError("ambiguity_rate must lie in [0, 1]")
        if self.points_per_class < 1 or self.feature_dim < 1:
            raise ValueError("points_per_class and feature_dim must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        for a, b in self.ambiguity_pairs or ():
            if a == b or not (0 <= a < h.leaf_count and 0 <= b < h.leaf_count):
                raise ValueError(f"bad ambiguity pair ({a}, {b})")
        if self.centers is not None and np.shape(self.centers) != (h.leaf_count, self.feature_dim):
            raise ValueError(f"centers must have shape ({h.leaf_count}, {self.feature_dim})")


class Scene(NamedTuple):
    features: np.ndarray
    labels: np.ndarray  # -1 for masked classes
    ambiguous: np.ndarray  # bool


def gen_scene(cfg: SceneConfig, h: LabelHierarchy | None = None) -> Scene:
    h = h or builtin_semantickitti()
    cfg.validate(h)
    if h.leaf_count == 0:
        raise ValueError("hierarchy has no leaf classes")
    centers = cfg.centers if cfg.centers is not None else default_centers(h, cfg.feature_dim)
    pairs = cfg.ambiguity_pairs if cfg.ambiguity_pairs is not None else sibling_pairs(h)
    partners: dict[int, list[int]] = {}
    for a, b in pairs:
        partners.setdefault(a, []).append(b)

    rng = np.random.default_rng(cfg.seed)
    m = cfg.points_per_class
    feats, labels, amb = [], [], []
    for c in range(h.leaf_count):
        k = int(round(cfg.ambiguity_rate * m)) if c in partners else 0
        mu = np.repeat(centers[c][None, :], m, axis=0)
        if k:
            other = np.asarray(partners[c])[rng.integers(len(partners[c]), size=k)]
            mu[:k] = 0.5 * (centers[c] + centers[other])
        feats.append(mu + cfg.noise_scale * rng.normal(size=mu.shape))
        labels.append(np.full(m, c, dtype=np.int64))
        amb.append(np.arange(m) < k)
    perm = rng.permutation(m * h.leaf_count)
    x = np.concatenate(feats)[perm]
    y = np.concatenate(labels)[perm]
    a = np.concatenate(amb)[perm]
    if cfg.mask_classes:
        y = np.where(np.isin(y, cfg.mask_classes), -1, y)
    return Scene(x, y, a)


def gen_scenes(cfg: SceneConfig, count: int, h: LabelHierarchy | None = None) -> list[Scene]:
    """``count`` scenes with seeds derived from ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(count)
    return [gen_scene(replace(cfg, seed=int(s)), h) for s in seeds]


# ---------------------------------------------------------------- network


def init_mlp(widths, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = math.sqrt(6.0 / fan_in)
        params.append((rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return params


def mlp_forward(params, x):
    acts = [x]
    for i, (w, b) in enumerate(params):
        z = acts[-1] @ w + b
        acts.append(np.maximum(z, 0.0) if i < len(params) - 1 else z)
    return acts[-1], acts


def mlp_backward(params, acts, dout):
    grads = []
    g = dout
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        grads.append((acts[i].T @ g, g.sum(axis=0)))
        if i:
            g = (g @ w.T) * (acts[i] > 0)
    return grads[::-1]


def point_loss_and_grad(logits, labels, h: LabelHierarchy, loss: str, eta_mode: str = "prose"):
    """Mean loss over labeled points and its gradient w.r.t. ``logits``."""
    valid = labels >= 0
    count = int(valid.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad
    x, y = logits[valid], labels[valid]
    if loss == "hce":
        eta = encode_targets(h, y, eta_mode)
        per, g = hce_loss(x, eta), hce_grad(x, eta)
    elif loss == "ce-flat":
        per, g = ce_loss_flat(x, y), ce_grad_flat(x, y)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    grad[valid] = g / count
    return float(per.mean()), grad


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for layer in params for a in layer]
        self.v = [np.zeros_like(a) for layer in params for a in layer]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        flat_p = [a for layer in params for a in layer]
        flat_g = [a for layer in grads for a in layer]
        new = []
        for i, (p, g) in enumerate(zip(flat_p, flat_g)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            new.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return list(zip(new[0::2], new[1::2]))


def cosine_lr(base: float, epoch: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / total))


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    max_epochs: int = 100
    batch_size: int = 8
    early_stop_delta: float = 0.001
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "hce"
    eta_mode: str = "prose"
    val_fraction: float = 0.2
    seed: int = 0

    def widths(self, feature_dim: int, h: LabelHierarchy) -> list[int]:
        if self.loss not in ("hce", "ce-flat"):
            raise ValueError(f"unknown loss {self.loss!r}")
        out = len(h) if self.loss == "hce" else h.leaf_count
        w = [feature_dim, *self.hidden, out]
        if min(w) < 1 or self.lr <= 0:
            raise ValueError("widths and learning rate must be positive")
        return w


@dataclass
class ToyModel:
    params: list
    loss: str
    hierarchy: LabelHierarchy

    def logits(self, x) -> np.ndarray:
        return mlp_forward(self.params, np.asarray(x, dtype=np.float64))[0]

    def predict(self, x):
        """Hierarchical predictions: argmax decode for HCE models, lifted for flat ones."""
        z = self.logits(x)
        if self.loss == "hce":
            return decode_batch(z, self.hierarchy)
        return lift_flat_batch(z, self.hierarchy, leaf_entropy_confidence(z, self.hierarchy))


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    stopped_early: bool = False
    best_epoch: int = -1

    COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_miou")


def _leaf_pred(z, h):
    return np.argmax(z[:, : h.leaf_count], axis=-1)


def train(cfg: TrainConfig, scenes: list[Scene], h: LabelHierarchy | None = None) -> tuple[ToyModel, TrainLog]:
    """Train on ``scenes``; the last ``val_fraction`` of a seeded shuffle is held out for validation.

    Returns the parameters from the epoch with the best validation mIoU.
    """
    h = h or builtin_semantickitti()
    if not scenes:
        raise ValueError("no scenes to train on")
    rng = np.random.default_rng(cfg.seed)
    dim = scenes[0].features.shape[1]
    params = init_mlp(cfg.widths(dim, h), rng)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)

    order = rng.permutation(len(scenes))
    n_val = int(round(cfg.val_fraction * len(scenes))) if len(scenes) > 1 else 0
    val = [scenes[i] for i in order[len(scenes) - n_val :]]
    trn = [scenes[i] for i in order[: len(scenes) - n_val]]
    vx = np.concatenate([s.features for s in val]) if val else None
    vy = np.concatenate([s.labels for s in val]) if val else None

    tlog = TrainLog(notes={"activation": "relu", "init": "he-uniform", "widths": cfg.widths(dim, h),
                           "optimizer": "adam", "schedule": "cosine", "train_scenes": len(trn),
                           "val_scenes": len(val)})
    best, best_params, wait = -math.inf, params, 0
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.max_epochs)
        perm = rng.permutation(len(trn))
        losses = []
        for start in range(0, len(trn), cfg.batch_size):
            batch = [trn[i] for i in perm[start : start + cfg.batch_size]]
            x = np.concatenate([s.features for s in batch])
            y = np.concatenate([s.labels for s in batch])
            with np.errstate(over="ignore", invalid="ignore"):
                z, acts = mlp_forward(params, x)
            if not np.all(np.isfinite(z)):
                raise TrainingDiverged(f"non-finite logits at epoch {epoch}, lr {lr:.3g}")
            loss, dz = point_loss_and_grad(z, y, h, cfg.loss, cfg.eta_mode)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, lr {lr:.3g}")
            params = opt.step(params, mlp_backward(params, acts, dz), lr)
            losses.append(loss)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        if val:
            with np.errstate(over="ignore", invalid="ignore"):
                z, _ = mlp_forward(params, vx)
            if not np.all(np.isfinite(z)):
                raise TrainingDiverged(f"non-finite validation logits at epoch {epoch}, lr {lr:.3g}")
            row["val_loss"], _ = point_loss_and_grad(z, vy, h, cfg.loss, cfg.eta_mode)
            row["val_miou"] = miou(tally(_leaf_pred(z, h), vy, h)).mean
            if row["val_miou"] > best + cfg.early_stop_delta:
                best, best_params, wait = row["val_miou"], params, 0
                tlog.best_epoch = epoch
            else:
                wait += 1
        else:
            row["val_loss"] = row["val_miou"] = math.nan
            best_params, tlog.best_epoch = params, epoch
        tlog.rows.append(row)
        log.debug("epoch %d lr %.2e loss %.4f val mIoU %.4f", epoch, lr, row["train_loss"], row["val_miou"])
        if val and wait >= cfg.patience:
            tlog.stopped_early = True
            break
    return ToyModel(best_params, cfg.loss, h), tlog


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentResult:
    name: str
    hmc: MetricReport
    vanilla: MetricReport
    logs: dict[str, TrainLog]
    extras: dict = field(default_factory=dict)


def _evaluate_model(model: ToyModel, scenes: list[Scene], seed: int, alpha_grid) -> MetricReport:
    x = np.concatenate([s.features for s in scenes])
    y = np.concatenate([s.labels for s in scenes])
    return evaluate(model.logits(x), y, model.hierarchy, alpha_grid=alpha_grid, seed=seed)


def _train_pair(scene_cfg, train_cfg, n_train, h):
    scenes = gen_scenes(scene_cfg, n_train, h)
    hmc, hlog = train(replace(train_cfg, loss="hce"), scenes, h)
    van, vlog = train(replace(train_cfg, loss="ce-flat"), scenes, h)
    return hmc, van, {"hmc": hlog, "vanilla": vlog}


EXPERIMENTS = ("crossover", "masking")

# many small training scenes give enough optimizer steps per epoch at batch size 8
_N_TRAIN, _TRAIN_POINTS_PER_CLASS = 1600, 5
_N_TEST = 10


def run_experiment(
    name: str,
    seed: int = 0,
    h: LabelHierarchy | None = None,
    train_cfg: TrainConfig | None = None,
    scene_cfg: SceneConfig | None = None,
    masked_class: str = "motorcyclist",
) -> ExperimentResult:
    """Train an HCE model and a flat cross-entropy model and evaluate both.

    ``crossover`` injects sibling ambiguity and compares hIoU over alpha;
    ``masking`` hides one leaf from the training labels and reports that
    class's hIoU on held-out scenes where it is labeled.
    """
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    h = h or builtin_semantickitti()
    train_cfg = replace(train_cfg or TrainConfig(lr=3e-3), seed=seed)
    alpha_grid = tuple(np.round(np.linspace(0, 1, 11), 12))
    seeds = np.random.SeedSequence(seed).generate_state(2)
    if name == "crossover":
        base = scene_cfg or SceneConfig(ambiguity_rate=0.3)
    else:
        base = scene_cfg or SceneConfig()
        base = replace(base, mask_classes=(h.id(masked_class),))
    train_scenes_cfg = replace(base, seed=int(seeds[0]), points_per_class=_TRAIN_POINTS_PER_CLASS)
    test_cfg = replace(base, seed=int(seeds[1]), mask_classes=())

    hmc, van, logs = _train_pair(train_scenes_cfg, train_cfg, _N_TRAIN, h)
    test = gen_scenes(test_cfg, _N_TEST, h)
    res = ExperimentResult(
        name, _evaluate_model(hmc, test, seed, alpha_grid), _evaluate_model(van, test, seed, alpha_grid), logs
    )
    x = np.concatenate([s.features for s in test])
    amb = np.concatenate([s.ambiguous for s in test])
    levels = hmc.predict(x).level
    res.extras["hmc_leaf_rate_unambiguous"] = float(np.mean(levels[~amb] == 0))
    res.extras["hmc_mean_level_unambiguous"] = float(levels[~amb].mean())
    res.extras["hmc_mean_level_ambiguous"] = float(levels[amb].mean()) if amb.any() else math.nan
    if name == "masking":
        c = h.id(masked_class)
        res.extras["masked_class"] = masked_class
        for tag, rep in (("hmc", res.hmc), ("vanilla", res.vanilla)):
            for a in alpha_grid:
                res.extras[f"{tag}_masked_hIoU@{a:g}"] = float(rep.per_class[f"hIoU@{a:g}"][c])
    return res
