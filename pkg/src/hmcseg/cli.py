"""Command line entry point: ``hmcseg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as hio
from .encoding import ETA_MODES, encode_targets
from .hierarchy import HierarchyError, LabelHierarchy, builtin_semantickitti, load_hierarchy
from .inference import confidence, lift_flat_batch
from .metrics import MetricReport, evaluate
from .toytrain import (
    EXPERIMENTS,
    Scene,
    SceneConfig,
    ToyModel,
    TrainConfig,
    TrainingDiverged,
    gen_scenes,
    run_experiment,
    train,
)

HIERARCHY_ENV = "HMCSEG_HIERARCHY"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive of ``stop`` within 1e-12) or a comma list."""
    if ":" in text:
        try:
            start, stop, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad grid {text!r}, expected start:stop:step") from None
        if step <= 0 or stop < start:
            raise argparse.ArgumentTypeError(f"bad grid {text!r}")
        # tolerance absorbs float error in (stop - start) / step, e.g. 1 / 0.1
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [min(round(start + i * step, 12), stop) for i in range(count)]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None


def _step_grid(step: float) -> list[float]:
    return parse_grid(f"0:1:{step}")


def _load_h(args) -> LabelHierarchy:
    path = getattr(args, "hierarchy", None) or os.environ.get(HIERARCHY_ENV)
    return load_hierarchy(path) if path else builtin_semantickitti()


def _read_labels(path: str, h: LabelHierarchy, learning_map: str | None) -> np.ndarray:
    if path.endswith(".label"):
        if not learning_map:
            raise ValueError("--learning-map is required for .label files")
        lmap = hio.parse_learning_map(Path(learning_map).read_text(encoding="utf-8"), h)
        return hio.read_label_file(path, lmap, h)
    out = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        tok = raw.split("#", 1)[0].strip()
        if not tok:
            continue
        try:
            c = int(tok)
        except ValueError:
            try:
                c = h.id(tok)
            except KeyError:
                raise ValueError(f"{path}:{lineno}: unknown class {tok!r}") from None
        if not (c == -1 or 0 <= c < h.leaf_count):
            raise ValueError(f"{path}:{lineno}: {tok!r} is not a leaf class")
        out.append(c)
    return np.array(out, dtype=np.int64)


def _report_table(rep: MetricReport, title: str = "") -> str:
    lines = [title] if title else []
    for k, v in rep.scalars.items():
        lines.append(f"  {k:<14} {100 * v:8.2f}" if v == v else f"  {k:<14}      n/a")
    return "\n".join(lines)


def _emit_report(rep: MetricReport, fmt: str, out: str | None) -> None:
    if fmt == "json":
        print(rep.to_json())
    elif fmt == "csv":
        print("metric,value")
        for k, v in rep.scalars.items():
            print(f"{k},{v!r}")
    else:
        print(_report_table(rep))
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        for key, cols in rep.curves.items():
            hio.write_csv(d / f"{key}.csv", list(cols), cols.values())


# ---------------------------------------------------------------- subcommands


def cmd_hierarchy(args) -> int:
    if args.file:
        h = load_hierarchy(args.file)
    else:
        h = _load_h(args)
    if args.action == "validate":
        print(f"ok: {h.summary()}")
        return 0
    if args.format == "json":
        print(json.dumps({"height": h.height, "leaf_count": h.leaf_count,
                          "nodes": [{"id": n.id, "name": n.name, "parent": n.parent, "level": n.level}
                                    for n in h.nodes]}, indent=2))
    elif args.format == "csv":
        print("id,name,parent,level")
        for n in h.nodes:
            print(f"{n.id},{n.name},{'' if n.parent is None else h.name(n.parent)},{n.level}")
    else:
        print(h.summary())

        def walk(c, indent):
            print(f"{'  ' * indent}{h.name(c)} (id {c}, level {h.level(c)})")
            for k in h.children(c):
                walk(k, indent + 1)

        walk(h.root, 0)
    return 0


def cmd_encode(args) -> int:
    h = _load_h(args)
    labels = _read_labels(args.labels, h, args.learning_map)
    eta = encode_targets(h, labels, args.eta_mode)
    header = h.names
    if args.out:
        hio.write_csv(args.out, header, eta.T)
    else:
        print(",".join(header))
        for row in eta:
            print(",".join(repr(float(v)) for v in row))
    return 0


def cmd_eval(args) -> int:
    h = _load_h(args)
    d = hio.read_dump(args.dump)
    if d.logits is None:
        raise ValueError(f"{args.dump}: dump holds no logits")
    gt = d.gt
    if args.labels:
        gt = _read_labels(args.labels, h, args.learning_map)
        if gt.size != len(d):
            raise ValueError(f"{args.labels}: {gt.size} labels for {len(d)} points")
    rep = evaluate(
        d.logits.astype(np.float64),
        gt,
        h,
        pred=d.pred,
        conf=d.confidence,
        alpha_grid=args.alpha_grid,
        ece_bins=args.ece_bins,
        fraction_grid=_step_grid(args.sparsification_step),
        theta_grid=_step_grid(args.theta_step),
        cer_tier=args.cer_tier,
        conf_kind=args.confidence,
        seed=args.seed,
    )
    _emit_report(rep, args.format, args.out)
    return 0


def cmd_lift(args) -> int:
    h = _load_h(args)
    if args.height is not None and args.height != h.height:
        raise ValueError(f"--height {args.height} does not match hierarchy height {h.height}")
    d = hio.read_dump(args.dump)
    if d.logits is None or d.logits.shape[1] != h.leaf_count:
        raise ValueError(f"{args.dump}: expected flat logits over {h.leaf_count} leaves")
    z = d.logits.astype(np.float64)
    conf = d.confidence if d.confidence is not None else confidence(z, h, args.confidence)
    conf = np.clip(np.asarray(conf, dtype=np.float64), 0.0, 1.0)
    lifted = lift_flat_batch(z, h, conf)
    hio.write_dump(args.out, replace(d, confidence=conf, pred=lifted.class_id))
    counts = np.bincount(lifted.level, minlength=h.height)
    print("level  points")
    for lvl, c in enumerate(counts):
        print(f"{lvl:5d}  {c:6d}")
    return 0


def _scene_cfg(args, h) -> SceneConfig:
    mask = tuple(h.id(m) for m in (args.mask or []))
    return SceneConfig(
        points_per_class=args.points_per_class,
        noise_scale=args.noise,
        ambiguity_rate=args.ambiguity_rate,
        mask_classes=mask,
        seed=args.seed,
    )


def _write_scenes(directory: Path, scenes: list[Scene]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scenes):
        hio.write_dump(directory / f"scene_{i:04d}.hseg",
                       hio.PredictionDump(gt=s.labels, features=s.features, ambiguous=s.ambiguous))


def _read_scenes(directory: str) -> list[Scene]:
    files = sorted(Path(directory).glob("*.hseg"))
    if not files:
        raise ValueError(f"{directory}: no .hseg scene dumps")
    out = []
    for f in files:
        d = hio.read_dump(f)
        if d.features is None:
            raise ValueError(f"{f}: not a scene dump (no features)")
        amb = d.ambiguous.astype(bool) if d.ambiguous is not None else np.zeros(len(d), bool)
        out.append(Scene(d.features.astype(np.float64), d.gt, amb))
    return out


def cmd_gen_scenes(args) -> int:
    h = _load_h(args)
    scenes = gen_scenes(_scene_cfg(args, h), args.count, h)
    _write_scenes(Path(args.out), scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _write_log(path: Path, tlog) -> None:
    cols = tlog.COLUMNS
    hio.write_csv(path, list(cols), [[r[c] for r in tlog.rows] for c in cols])


def cmd_train_toy(args) -> int:
    h = _load_h(args)
    scenes = _read_scenes(args.scenes) if args.scenes else gen_scenes(_scene_cfg(args, h), args.count, h)
    cfg = TrainConfig(lr=args.lr, max_epochs=args.epochs, loss=args.loss, eta_mode=args.eta_mode, seed=args.seed)
    model, tlog = train(cfg, scenes, h)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_log(out / "train_log.csv", tlog)
    np.savez(out / "model.npz", **{f"{k}{i}": a for i, (w, b) in enumerate(model.params) for k, a in (("w", w), ("b", b))})
    print(f"trained {len(tlog.rows)} epochs (best {tlog.best_epoch}, early stop: {tlog.stopped_early})")
    if args.test_scenes:
        _predict_dump(model, _read_scenes(args.test_scenes), out / "predictions.hseg")
        d = hio.read_dump(out / "predictions.hseg")
        rep = evaluate(d.logits.astype(np.float64), d.gt, h, seed=args.seed)
        _emit_report(rep, args.format, str(out))
    return 0


def _predict_dump(model: ToyModel, scenes, path) -> None:
    x = np.concatenate([s.features for s in scenes])
    y = np.concatenate([s.labels for s in scenes])
    hio.write_dump(path, hio.PredictionDump(gt=y, logits=model.logits(x)))


def cmd_experiment(args) -> int:
    res = run_experiment(args.name, seed=args.seed, h=_load_h(args))
    alphas = res.hmc.grids["alpha"]
    print(f"experiment {res.name} (seed {args.seed})")
    print("alpha   " + " ".join(f"{a:6.1f}" for a in alphas))
    for tag, rep in (("hmc", res.hmc), ("vanilla", res.vanilla)):
        print(f"{tag:<8}" + " ".join(f"{100 * rep.scalars[f'hIoU@{a:g}']:6.2f}" for a in alphas))
    for k, v in res.extras.items():
        if "masked_hIoU" in k and not any(k.endswith(f"@{a:g}") for a in (0, 0.5, 0.7, 1)):
            continue
        print(f"  {k}: {v:.4f}" if isinstance(v, float) else f"  {k}: {v}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for tag, rep in (("hmc", res.hmc), ("vanilla", res.vanilla)):
            (out / f"{tag}_report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
            _write_log(out / f"{tag}_train_log.csv", res.logs[tag])
        extras = {k: (None if isinstance(v, float) and v != v else v) for k, v in res.extras.items()}
        (out / "extras.json").write_text(json.dumps(extras, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hmcseg", description="Hierarchical multi-label segmentation toolkit.")
    p.add_argument("--hierarchy", help=f"hierarchy file (default: ${HIERARCHY_ENV} or built-in SemanticKITTI)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("hierarchy", help="validate or show a hierarchy")
    s.add_argument("action", choices=("validate", "show"))
    s.add_argument("file", nargs="?")
    s.add_argument("--format", choices=("table", "json", "csv"), default="table")
    s.set_defaults(func=cmd_hierarchy)

    s = sub.add_parser("encode", help="write weighted hierarchical targets as CSV")
    s.add_argument("labels", help="text file with one leaf name/id per line, or a .label file")
    s.add_argument("--learning-map")
    s.add_argument("--eta-mode", choices=ETA_MODES, default="prose")
    s.add_argument("--out")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("eval", help="compute the metric suite for a prediction dump")
    s.add_argument("dump")
    s.add_argument("--labels", help="override dump ground truth (text or .label)")
    s.add_argument("--learning-map")
    s.add_argument("--alpha-grid", type=parse_grid, default=parse_grid("0:1:0.1"))
    s.add_argument("--ece-bins", type=int, default=15)
    s.add_argument("--sparsification-step", type=float, default=0.05)
    s.add_argument("--theta-step", type=float, default=0.05)
    s.add_argument("--cer-tier", type=int, default=2)
    s.add_argument("--confidence", choices=("entropy", "maxprob"), default="entropy")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("table", "json", "csv"), default="table")
    s.add_argument("--out", help="directory for report.json and curve CSVs")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("lift", help="lift flat predictions into the hierarchy")
    s.add_argument("dump")
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int)
    s.add_argument("--confidence", choices=("entropy", "maxprob"), default="entropy")
    s.set_defaults(func=cmd_lift)

    def scene_args(s):
        s.add_argument("--count", type=int, default=50)
        s.add_argument("--points-per-class", type=int, default=20)
        s.add_argument("--noise", type=float, default=0.35)
        s.add_argument("--ambiguity-rate", type=float, default=0.0)
        s.add_argument("--mask", action="append", metavar="CLASS")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("gen-scenes", help="write synthetic scenes as dumps")
    scene_args(s)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_scenes)

    s = sub.add_parser("train-toy", help="train the toy classifier")
    scene_args(s)
    s.add_argument("--scenes", help="directory of scene dumps (default: generate)")
    s.add_argument("--test-scenes", help="directory of scene dumps to predict and evaluate")
    s.add_argument("--loss", choices=("hce", "ce-flat"), default="hce")
    s.add_argument("--eta-mode", choices=ETA_MODES, default="prose")
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--format", choices=("table", "json", "csv"), default="table")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("experiment", help="run a paired HMC / vanilla experiment")
    s.add_argument("name", choices=EXPERIMENTS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, HierarchyError, hio.FormatError, OSError, TrainingDiverged) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"hmcseg {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
