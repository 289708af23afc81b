"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the verdicts.
"""

import struct
import time
from fractions import Fraction

import numpy as np
import pytest

import bruteforce as bf
from conftest import random_hierarchy
from hmcseg.encoding import encode_target, target_weight_sum
from hmcseg.hierarchy import builtin_semantickitti, parse_hierarchy
from hmcseg.io import PredictionDump, dump_bytes, parse_dump, read_dump, semantic_ids, write_dump
from hmcseg.metrics import HierTally, ause, ause_miou, brier_scores, cer, ece, evaluate, hiou, miou, tally, uiou
from hmcseg.objective import hce_grad, hce_loss, hce_minimizer, softmax_full
from hmcseg.toytrain import init_mlp, mlp_backward, mlp_forward, point_loss_and_grad, run_experiment

GRAD_TOL_LOSS = 1e-4
GRAD_TOL_NET = 1e-3
GRAD_BUDGET_S = 10.0
TV_TOL = 1e-3
ORACLE_BUDGET_S = 30.0
ORACLE_ALPHAS = (0.0, 0.3, 0.5, 0.7, 1.0)
CROSSOVER_BUDGET_S = 300.0
LEAF_RATE_MIN = 0.90
BERNOULLI_ECE_MAX = 0.01


@pytest.fixture
def verdict(capsys):
    def say(tag, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {tag}: {detail}")
        assert ok, f"{tag}: {detail}"

    return say


@pytest.fixture(scope="session")
def crossover():
    t0 = time.perf_counter()
    res = run_experiment("crossover", seed=0)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def masking():
    return run_experiment("masking", seed=0)


def _rel(a, b, floor):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def test_c1_gradient_correctness(verdict):
    kitti = builtin_semantickitti()
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_loss = 0.0
    step = 1e-4
    for i in range(100):
        t = encode_target(kitti, int(rng.integers(19)), "prose" if i % 2 else "formula")
        x = rng.normal(scale=2.0, size=28)
        fd = np.empty(28)
        for k in range(28):
            e = np.zeros(28)
            e[k] = step
            fd[k] = (hce_loss(x + e, t) - hce_loss(x - e, t)) / (2 * step)
        worst_loss = max(worst_loss, _rel(hce_grad(x, t), fd, 1e-3).max())

    worst_net = 0.0
    for i in range(100):
        loss = "hce" if i % 2 == 0 else "ce-flat"
        out = 28 if loss == "hce" else 19
        params = init_mlp([4, 5, out], rng)
        x = rng.normal(size=(4, 4))
        y = rng.integers(0, 19, 4)
        z, acts = mlp_forward(params, x)
        grads = mlp_backward(params, acts, point_loss_and_grad(z, y, kitti, loss)[1])
        flat_p = [a for layer in params for a in layer]
        flat_g = [a for layer in grads for a in layer]
        for p, g in zip(flat_p, flat_g):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-5
                up = point_loss_and_grad(mlp_forward(params, x)[0], y, kitti, loss)[0]
                p[idx] = old - 1e-5
                down = point_loss_and_grad(mlp_forward(params, x)[0], y, kitti, loss)[0]
                p[idx] = old
                fd = (up - down) / 2e-5
                worst_net = max(worst_net, float(_rel(g[idx], fd, 1e-4)))
    dt = time.perf_counter() - t0
    ok = worst_loss < GRAD_TOL_LOSS and worst_net < GRAD_TOL_NET and dt < GRAD_BUDGET_S
    verdict("C1 gradient correctness", ok,
            f"loss max rel err {worst_loss:.2e} (<{GRAD_TOL_LOSS:g}), network {worst_net:.2e} "
            f"(<{GRAD_TOL_NET:g}), {dt:.1f}s (<{GRAD_BUDGET_S:g}s)")


def test_c2_minimizer_oracle(verdict):
    kitti = builtin_semantickitti()
    leaf = kitti.id("person")
    parts, ok = [], True
    for mode in ("prose", "formula"):
        t = encode_target(kitti, leaf, mode)
        x = np.random.default_rng(3).normal(size=28)
        lr = 1.0 / target_weight_sum(t)
        for _ in range(20000):
            x -= lr * hce_grad(x, t)
        p = softmax_full(x)
        target = hce_minimizer(t)
        tv = 0.5 * np.abs(p - target).sum()
        top = kitti.name(int(np.argmax(p)))
        expect = "person" if mode == "prose" else "any"
        ok &= tv < TV_TOL and top == expect
        parts.append(f"{mode}: TV {tv:.1e}, argmax {top}")
    verdict("C2 minimizer oracle", ok, "; ".join(parts))


def _shapes():
    rng = np.random.default_rng(2024)
    return [builtin_semantickitti(), random_hierarchy(rng, 3, 4, 2), random_hierarchy(rng, 5, 2, 2)]


def _instance(rng, h, n):
    gts = rng.integers(0, h.leaf_count, n)
    gts[rng.uniform(size=n) < 0.05] = -1
    preds = rng.integers(0, len(h), n)
    hit = (rng.uniform(size=n) < 0.4) & (gts >= 0)
    preds[hit] = gts[hit]
    on_path = np.flatnonzero((rng.uniform(size=n) < 0.2) & (gts >= 0))
    for i in on_path:
        preds[i] = h.ancestor_at_level(int(gts[i]), int(rng.integers(h.height)))
    return preds, gts


def test_c3_metric_oracle(verdict):
    rng = np.random.default_rng(31)
    shapes = _shapes()
    thetas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    t0 = time.perf_counter()
    mismatches = []
    worst = 0.0
    for i in range(50):
        h = shapes[i % 3]
        n = int(rng.integers(1, 1001))
        preds, gts = _instance(rng, h, n)
        t = tally(preds, gts, h)
        # integer tallies must agree exactly
        for s, st in bf.point_sets(preds.tolist(), gts.tolist(), h).items():
            ts = [len(st["ts"].get(l, ())) for l in range(h.height)]
            if (t.tp[s], t.fp[s], t.fn[s], list(t.ts[s])) != (len(st["tp"]), len(st["fp"]), len(st["fn"]), ts):
                mismatches.append(f"instance {i} class {s} counts")
        for a in ORACLE_ALPHAS:
            per, mean = bf.hiou(preds.tolist(), gts.tolist(), h, Fraction(a))
            got = hiou(t, a)
            for s, v in per.items():
                worst = max(worst, abs(got.per_class[s] - float(v)))
            if mean is not None:
                worst = max(worst, abs(got.mean - float(mean)))
        if cer(preds, gts, h, 2) != float(bf.cer(preds.tolist(), gts.tolist(), h, 2)):
            mismatches.append(f"instance {i} CER")
        leaf = rng.integers(0, h.leaf_count, n)
        _, m = bf.miou(leaf.tolist(), gts.tolist(), h)
        if m is not None:
            worst = max(worst, abs(miou(tally(leaf, gts, h)).mean - float(m)))
        conf = np.round(rng.uniform(size=n), 1)  # many ties on the thresholds
        curve, um = bf.uiou(conf.tolist(), leaf.tolist(), gts.tolist(), h, thetas)
        u = uiou(conf, leaf, gts, h, thetas)
        worst = max(worst, np.abs(u.curve - [float(c) for c in curve]).max(), abs(u.uiou - float(um)))
    dt = time.perf_counter() - t0
    # rational means rounded once vs float arithmetic: agreement to a few ulps
    ok = not mismatches and worst <= 1e-14 and dt < ORACLE_BUDGET_S
    verdict("C3 metric oracle equivalence", ok,
            f"50 instances on {[h.summary() for h in shapes]}; count mismatches {len(mismatches)}, "
            f"max value diff {worst:.1e}, {dt:.1f}s (<{ORACLE_BUDGET_S:g}s)")


def test_c4_hiou_invariants(verdict):
    kitti = builtin_semantickitti()
    rng = np.random.default_rng(4)
    monotone = leaf_equal = True
    for _ in range(30):
        preds, gts = _instance(rng, kitti, 500)
        t = tally(preds, gts, kitti)
        vals = [hiou(t, a).mean for a in np.linspace(0, 1, 21)]
        monotone &= bool(np.all(np.diff(vals) >= 0))
        tl = tally(rng.integers(0, 19, 500), gts, kitti)
        leaf_equal &= all(hiou(tl, a).mean == miou(tl).mean for a in np.linspace(0, 1, 11))
    # hand case: road has TP 2, FP 1 (a sidewalk point called road), FN 2 (one lifted to static, one called car)
    small = parse_hierarchy("any\nstatic > any\ndynamic > any\nroad > static\nsidewalk > static\ncar > dynamic\n")
    road, sidewalk, static, car = (small.id(c) for c in ("road", "sidewalk", "static", "car"))
    ht = tally([road, road, static, car, road], [road, road, road, road, sidewalk], small)
    counts = (ht.tp[road], ht.fp[road], ht.fn[road], ht.ts[road, 1])
    h05, h10 = hiou(ht, 0.5).per_class[road], hiou(ht, 1.0).per_class[road]
    hand = counts == (2, 1, 2, 1) and h05 == 0.5 and h10 == 0.6
    verdict("C4 hIoU invariants", monotone and leaf_equal and hand,
            f"monotone in alpha {monotone}, leaf-only equals mIoU {leaf_equal}, "
            f"hand case counts {tuple(int(c) for c in counts)} -> {h05:g} at 0.5, {h10:g} at 1.0")


def test_c5_calibration_sanity(verdict):
    kitti = builtin_semantickitti()
    rng = np.random.default_rng(5)
    g = rng.integers(0, 19, 2000)
    x = np.full((2000, 28), -40.0)
    x[np.arange(2000), g] = 40.0
    s = evaluate(x, g, kitti).scalars
    conf = rng.uniform(size=100_000)
    e_bern, _ = ece(conf, rng.uniform(size=conf.size) < conf)
    ok = (
        s["ECE"] == pytest.approx(0, abs=1e-12)
        and s["AUSE_BS"] == pytest.approx(0, abs=1e-12)
        and s["AUSE_mIoU"] == pytest.approx(0, abs=1e-12)
        and s["uIoU"] == pytest.approx(1, abs=1e-12)
        and e_bern < BERNOULLI_ECE_MAX
    )
    verdict("C5 calibration sanity", ok,
            f"perfect predictor ECE {s['ECE']:.1e}, AUSE_BS {s['AUSE_BS']:.1e}, AUSE_mIoU {s['AUSE_mIoU']:.1e}, "
            f"uIoU {s['uIoU']:.6f}; Bernoulli ECE {e_bern:.4f} (<{BERNOULLI_ECE_MAX:g})")


def test_c6_crossover(verdict, crossover):
    res, dt = crossover
    alphas = res.hmc.grids["alpha"]
    hmc = dict(res.hmc.hiou_series())
    van = dict(res.vanilla.hiou_series())
    wins = [a for a in alphas if a <= 0.5 and hmc[a] > van[a]]
    s_h, s_v = hmc[1.0] - hmc[0.0], van[1.0] - van[0.0]
    ok = bool(wins) and s_h > s_v and dt < CROSSOVER_BUDGET_S
    verdict("C6 crossover", ok,
            f"HMC beats vanilla+lift at alpha {wins[:1] or 'none'} (<=0.5); spread HMC {s_h:.3f} vs vanilla "
            f"{s_v:.3f}; {dt:.0f}s (<{CROSSOVER_BUDGET_S:g}s)")


def test_c7_masking(verdict, masking):
    e = masking.extras
    h0, v0, h1, v1 = (e[f"{m}_masked_hIoU@{a}"] for m, a in (("hmc", 0), ("vanilla", 0), ("hmc", 1), ("vanilla", 1)))
    ok = h0 == 0 and v0 == 0 and h1 > 0 and h1 >= v1
    verdict("C7 masking", ok,
            f"{e['masked_class']}: hIoU@0 HMC {h0:g} vanilla {v0:g}; hIoU@1 HMC {h1:.3f} vs vanilla {v1:.3f}")


def test_c8_abstention(verdict, crossover):
    e = crossover[0].extras
    rate = e["hmc_leaf_rate_unambiguous"]
    lu, la = e["hmc_mean_level_unambiguous"], e["hmc_mean_level_ambiguous"]
    ok = rate > LEAF_RATE_MIN and la > lu
    verdict("C8 abstention", ok,
            f"leaf rate on unambiguous points {rate:.3f} (>{LEAF_RATE_MIN:g}); mean level ambiguous {la:.3f} "
            f"vs unambiguous {lu:.3f}")


def test_c9_format_roundtrips(verdict, tmp_path):
    rng = np.random.default_rng(9)
    n = 257
    gt = rng.integers(0, 19, n)
    gt[::5] = -1
    d = PredictionDump(gt=gt, logits=rng.normal(size=(n, 28)), confidence=rng.uniform(size=n),
                       ambiguous=rng.integers(0, 2, n), pred=rng.integers(0, 28, n))
    path = tmp_path / "d.hseg"
    write_dump(path, d)
    raw = path.read_bytes()
    dump_ok = dump_bytes(read_dump(path)) == raw and dump_bytes(parse_dump(raw)) == raw
    words = struct.pack("<3I", 0x0001000A, 0xABCD0028, 0x00000000)
    label_ok = semantic_ids(words).tolist() == [10, 40, 0]
    kitti = builtin_semantickitti()
    text = kitti.serialize()
    again = parse_hierarchy(text)
    hier_ok = again.serialize() == text and parse_hierarchy(again.serialize()) == again
    verdict("C9 format round-trips", dump_ok and label_ok and hier_ok,
            f"dump bitwise {dump_ok}, .label low-16 {label_ok}, hierarchy fixpoint {hier_ok}")
