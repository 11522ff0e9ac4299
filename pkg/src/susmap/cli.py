"""Batch command line interface.

Every subcommand writes its outputs (delimited files, interchange rasters,
figures) into ``--out DIR`` together with a ``manifest.json`` recording the
resolved configuration, its sha256, the seed, and library versions. Exit
codes: 0 success, 1 usage error, 2 data or numerical error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .alignment import (
    DEFAULT_RANGES_M,
    DEFAULT_WEIGHT_THRESHOLD,
    AlignmentConfig,
    align_features,
    select_aligned_channels,
)
from .dataset import (
    DEFAULT_CORE,
    DEFAULT_PAD,
    SPLITS,
    load_manifest,
    make_patch_grid,
    mark_positives,
    save_manifest,
    split_patches,
    split_subset,
)
from .engine import gradient_suite
from .errors import DataError, SusmapError, UsageError
from .evaluation import nll_from_scores, predict_full, roc_curve, split_scores
from .models import (
    MODEL_KINDS,
    ModelSpec,
    build_model,
    llr_channel_weights,
    load_model,
    receptive_field,
    save_model,
)
from .raster import (
    load_categorical,
    load_raster,
    load_stack,
    concat_stacks,
    build_feature_stack,
    write_categorical,
    write_raster,
    write_stack,
)
from .synthetic import WorldConfig, make_world
from .training import TrainConfig, base_rate, train


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits with code 2
        raise UsageError(message)


def _float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _write_manifest(outdir: Path, command: str, config: dict, outputs: list[str]) -> None:
    canon = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": json.loads(canon),
        "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
        "seed": config.get("seed"),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "susmap": __version__,
        },
        "outputs": sorted(outputs),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: tuple, rows: list[tuple]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _outdir(args)
    config = WorldConfig(
        rows=args.rows, cols=args.cols, pixel_size=args.pixel_size, seed=args.seed,
        num_hills=args.num_hills, num_classes=args.num_classes,
        class_smooth_px=args.class_smooth_px, weak_class=args.weak_class,
        label_range_m=args.label_range_m, label_slope_gain=args.label_slope_gain,
        label_weak_gain=args.label_weak_gain, label_bias=args.label_bias)
    world = make_world(config)
    write_raster(out / "dem.json", world.dem)
    write_raster(out / "slope.json", world.slope)
    write_categorical(out / "lithology.json", world.lithology)
    write_raster(out / "labels.json", world.labels, valid_min=0.0, valid_max=1.0)
    write_stack(out / "stack.json", world.stack)
    outputs = ["dem.json", "dem.bin", "slope.json", "slope.bin", "lithology.json",
               "lithology.bin", "labels.json", "labels.bin", "stack.json", "stack.bin"]
    _write_manifest(out, "synth", vars(args) | {"out": str(out)}, outputs)
    pos = world.labels.values[world.labels.valid].mean()
    print(f"world {config.rows}x{config.cols} seed={config.seed} "
          f"positives={pos:.4%} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def _parse_named(pairs: list[str] | None, flag: str) -> list[tuple[str, Path]]:
    out = []
    for pair in pairs or []:
        name, sep, path = pair.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"{flag} expects NAME=PATH, got {pair!r}")
        out.append((name, Path(path)))
    return out


def cmd_encode(args) -> int:
    out = _outdir(args)
    cats = _parse_named(args.categorical, "--categorical")
    conts = _parse_named(args.continuous, "--continuous")
    if not cats and not conts:
        raise UsageError("need at least one --categorical or --continuous layer")
    cat_layers = [load_categorical(path) for _, path in cats]
    cont_layers = [load_raster(path) for _, path in conts]
    stack = build_feature_stack(
        cont_layers, cat_layers,
        continuous_names=[name for name, _ in conts],
        group_names=[name for name, _ in cats])
    write_stack(out / "stack.json", stack)
    _write_manifest(out, "encode", vars(args) | {"out": str(out)},
                    ["stack.json", "stack.bin"])
    print(f"encoded {stack.num_channels} channels "
          f"({len(cats)} categorical groups, {len(conts)} continuous) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# align
# ---------------------------------------------------------------------------


def cmd_align(args) -> int:
    out = _outdir(args)
    stack = load_stack(args.stack)
    dem = load_raster(args.dem)
    weights = None
    if args.select:
        selected = []
        for tok in args.select.split(","):
            tok = tok.strip()
            if not tok:
                continue
            selected.append(int(tok) if tok.lstrip("-").isdigit()
                            else stack.channel_index(tok))
    elif args.weights:
        model, _ = load_model(Path(args.weights))
        weights = llr_channel_weights(model)
        if weights.size != stack.num_channels:
            raise DataError(
                f"weights cover {weights.size} channels, stack has {stack.num_channels}")
        selected = select_aligned_channels(weights, args.threshold)
    else:
        raise UsageError("provide --weights (a trained llr checkpoint) or --select")

    config = AlignmentConfig(ranges_m=tuple(args.ranges), selected_channels=tuple(selected),
                             weight_threshold=args.threshold)
    aligned = align_features(stack, dem, config)
    write_stack(out / "aligned.json", aligned)
    combined = concat_stacks(stack, aligned)
    write_stack(out / "combined.json", combined)
    rows = [(i, stack.channel_names[i],
             "" if weights is None else f"{weights[i]:.6g}") for i in selected]
    _write_csv(out / "selected.csv", ("channel_index", "channel_name", "weight"), rows)
    _write_manifest(out, "align", vars(args) | {"out": str(out), "selected": list(selected)},
                    ["aligned.json", "aligned.bin", "combined.json", "combined.bin",
                     "selected.csv"])
    print(f"aligned {len(selected)} channels x {len(args.ranges)} ranges = "
          f"{aligned.num_channels} features; combined stack has "
          f"{combined.num_channels} channels -> {out}")
    return 0


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def cmd_split(args) -> int:
    out = _outdir(args)
    labels = load_raster(args.labels)
    if len(args.fractions) != 3:
        raise UsageError(f"--fractions needs three values, got {args.fractions}")
    patches = make_patch_grid(labels.georef, core=args.core, pad=args.pad)
    patches = split_patches(patches, tuple(args.fractions), seed=args.seed)
    patches = mark_positives(patches, labels)
    save_manifest(out / "patches.csv", patches)
    counts = {s: sum(1 for p in patches if p.split == s) for s in SPLITS}
    pos = sum(1 for p in patches if p.has_positive)
    _write_manifest(out, "split", vars(args) | {"out": str(out)}, ["patches.csv"])
    print(f"{len(patches)} patches (core {args.core}, pad {args.pad}): "
          f"{counts['train']}/{counts['val']}/{counts['test']} train/val/test, "
          f"{pos} with positives -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {"optimizer", "lr", "epochs", "batch_size", "weight_decay",
               "oversample_ratio", "patience", "lr_factor", "seed"}
_MODEL_KEYS = {"kind", "depth", "widths", "hidden", "naive_p"}


def _resolve_train_config(args) -> dict:
    resolved: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        unknown = set(loaded) - _TRAIN_KEYS - _MODEL_KEYS
        if unknown:
            raise DataError(f"unknown config keys in {path}: {sorted(unknown)}")
        resolved.update(loaded)
    for key in ("optimizer", "lr", "epochs", "batch_size", "weight_decay",
                "oversample_ratio", "patience", "lr_factor", "seed", "depth"):
        val = getattr(args, key)
        if val is not None:
            resolved[key] = val
    if args.model is not None:
        resolved["kind"] = args.model
    if args.widths is not None:
        resolved["widths"] = args.widths
    if args.hidden is not None:
        resolved["hidden"] = args.hidden
    if args.naive_p is not None and args.naive_p != "estimate":
        try:
            resolved["naive_p"] = float(args.naive_p)
        except ValueError as exc:
            raise UsageError(f"--naive-p expects a number or 'estimate'") from exc
    if "kind" not in resolved:
        raise UsageError("model kind is required (--model or 'kind' in --config)")
    if resolved["kind"] not in MODEL_KINDS:
        raise UsageError(f"unknown model kind {resolved['kind']!r}")
    return resolved


def cmd_train(args) -> int:
    out = _outdir(args)
    resolved = _resolve_train_config(args)
    stack = load_stack(args.stack)
    labels = load_raster(args.labels)
    patches = load_manifest(args.patches)

    kind = resolved["kind"]
    train_cfg = TrainConfig(**{k: resolved[k] for k in _TRAIN_KEYS if k in resolved})
    spec_kwargs = {k: resolved[k] for k in ("depth", "naive_p") if k in resolved}
    if "widths" in resolved:
        spec_kwargs["widths"] = tuple(resolved["widths"])
    if "hidden" in resolved:
        spec_kwargs["hidden"] = tuple(resolved["hidden"])
    if kind == "naive" and "naive_p" not in resolved:
        spec_kwargs["naive_p"] = base_rate(labels, split_subset(patches, "train"))
    spec = ModelSpec(kind=kind, in_channels=stack.num_channels, **spec_kwargs)

    model = build_model(spec, np.random.default_rng(train_cfg.seed))
    log = print if args.verbose else None
    history, optimizer = train(model, stack, labels, patches, train_cfg, log=log)

    save_model(out / "model.json", model, optimizer)
    history.save_csv(out / "history.csv")
    from .plots import save_history_figure  # deferred: keeps non-plot runs matplotlib-free

    save_history_figure(out / "loss.png", history, title=f"{kind} training")
    _write_manifest(out, "train",
                    resolved | {"in_channels": spec.in_channels, "out": str(out),
                                "stack": args.stack, "labels": args.labels,
                                "patches": args.patches},
                    ["model.json", "model.bin", "history.csv", "loss.png"])
    print(f"{kind}: best val NLL {history.best_val_nll:.5f} at epoch "
          f"{history.best_epoch} ({len(history.epochs)} epochs) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def cmd_predict(args) -> int:
    out = _outdir(args)
    stack = load_stack(args.stack)
    model, _ = load_model(Path(args.model))
    prob = predict_full(model, stack, core=args.core, pad=args.pad)
    write_raster(out / "susceptibility.json", prob, valid_min=0.0, valid_max=1.0)
    from .plots import save_heatmap

    save_heatmap(out / "susceptibility.png", prob, title="susceptibility",
                 vmin=0.0, vmax=1.0)
    _write_manifest(out, "predict", vars(args) | {"out": str(out)},
                    ["susceptibility.json", "susceptibility.bin", "susceptibility.png"])
    print(f"{model.spec.kind} susceptibility map {prob.georef.rows}x"
          f"{prob.georef.cols} (receptive radius {receptive_field(model.spec)}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval / roc
# ---------------------------------------------------------------------------


def _write_roc_outputs(out: Path, command: str, args, rows: list[tuple],
                       curves: list[tuple[str, object]], roc_rows: list[tuple]) -> None:
    _write_csv(out / "metrics.csv", ("split", "n_cells", "n_positives", "nll", "auc"), rows)
    _write_csv(out / "roc.csv", ("split", "threshold", "fpr", "tpr"), roc_rows)
    from .plots import save_roc_figure

    save_roc_figure(out / "roc.png", curves)
    _write_manifest(out, command, vars(args) | {"out": str(out)},
                    ["metrics.csv", "roc.csv", "roc.png"])


def cmd_eval(args) -> int:
    out = _outdir(args)
    stack = load_stack(args.stack)
    labels = load_raster(args.labels)
    patches = load_manifest(args.patches)
    model, _ = load_model(Path(args.model))
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    for s in splits:
        if s not in SPLITS:
            raise UsageError(f"unknown split {s!r}; expected subset of {SPLITS}")

    rows, curves, roc_rows = [], [], []
    for split in splits:
        scores, targets = split_scores(model, stack, labels, split_subset(patches, split))
        nll = nll_from_scores(scores, targets)
        curve = roc_curve(scores, targets)
        rows.append((split, scores.size, int(targets.sum()),
                     f"{nll:.6f}", f"{curve.auc:.6f}"))
        curves.append((split, curve))
        roc_rows += [(split, f"{th:.6g}", f"{f:.6f}", f"{t:.6f}")
                     for th, f, t in zip(curve.thresholds, curve.fpr, curve.tpr)]
        print(f"{split}: n={scores.size} positives={int(targets.sum())} "
              f"NLL={nll:.4f} AUC={curve.auc:.4f}")
    _write_roc_outputs(out, "eval", args, rows, curves, roc_rows)
    return 0


def cmd_roc(args) -> int:
    out = _outdir(args)
    pred = load_raster(args.pred)
    labels = load_raster(args.labels)
    if pred.georef != labels.georef:
        raise DataError("prediction and labels cover different extents")
    mask = pred.valid & labels.valid
    if not mask.any():
        raise DataError("no cells are valid in both prediction and labels")
    scores = pred.values[mask].astype(np.float64)
    targets = labels.values[mask] > 0.5
    nll = nll_from_scores(scores, targets)
    curve = roc_curve(scores, targets)
    rows = [("map", scores.size, int(targets.sum()), f"{nll:.6f}", f"{curve.auc:.6f}")]
    roc_rows = [("map", f"{th:.6g}", f"{f:.6f}", f"{t:.6f}")
                for th, f, t in zip(curve.thresholds, curve.fpr, curve.tpr)]
    print(f"map: n={scores.size} positives={int(targets.sum())} "
          f"NLL={nll:.4f} AUC={curve.auc:.4f}")
    _write_roc_outputs(out, "roc", args, rows, [("map", curve)], roc_rows)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = gradient_suite(range(args.seeds), step=args.step, tol=args.tol)
    worst: dict[str, float] = {}
    for r in results:
        op = r.name.split("[")[0]
        worst[op] = max(worst.get(op, 0.0), r.max_rel_error)
    all_ok = all(r.passed for r in results)
    for op in sorted(worst):
        status = "PASS" if worst[op] < args.tol else "FAIL"
        print(f"{op:<22} max_rel_error={worst[op]:.3e}  {status}")
    if args.out:
        out = _outdir(args)
        _write_csv(out / "gradcheck.csv", ("op", "max_rel_error", "tolerance", "passed"),
                   [(r.name, f"{r.max_rel_error:.6e}", f"{r.tolerance:g}",
                     int(r.passed)) for r in results])
        _write_manifest(out, "gradcheck", vars(args) | {"out": str(out)},
                        ["gradcheck.csv"])
    if not all_ok:
        raise DataError("gradient check failed; see the table above")
    print(f"all {len(results)} checks passed (tol {args.tol:g})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="susmap",
                     description="landslide susceptibility mapping pipeline")
    parser.add_argument("--version", action="version", version=f"susmap {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic test world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=512)
    p.add_argument("--cols", type=int, default=512)
    p.add_argument("--pixel-size", type=float, default=10.0)
    p.add_argument("--num-hills", type=int, default=6)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--class-smooth-px", type=float, default=8.0)
    p.add_argument("--weak-class", type=int, default=0)
    p.add_argument("--label-range-m", type=float, default=100.0)
    p.add_argument("--label-slope-gain", type=float, default=3.0)
    p.add_argument("--label-weak-gain", type=float, default=4.0)
    p.add_argument("--label-bias", type=float, default=8.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode", help="one-hot encode layers into a feature stack")
    p.add_argument("--out", required=True)
    p.add_argument("--categorical", action="append", metavar="NAME=PATH")
    p.add_argument("--continuous", action="append", metavar="NAME=PATH")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("align", help="build uphill-aligned features")
    p.add_argument("--out", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--dem", required=True)
    p.add_argument("--weights", help="llr checkpoint used to select channels")
    p.add_argument("--select", help="explicit channels (names or indices, comma-separated)")
    p.add_argument("--threshold", type=float, default=DEFAULT_WEIGHT_THRESHOLD)
    p.add_argument("--ranges", type=_float_list, default=list(DEFAULT_RANGES_M),
                   metavar="M1,M2,...")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("split", help="tile the extent and assign splits")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--core", type=int, default=DEFAULT_CORE)
    p.add_argument("--pad", type=int, default=DEFAULT_PAD)
    p.add_argument("--fractions", type=_float_list, default=[0.8, 0.1, 0.1],
                   metavar="TRAIN,VAL,TEST")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on split patches")
    p.add_argument("--out", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--config", help="JSON file with model/training settings")
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--oversample-ratio", dest="oversample_ratio", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr-factor", dest="lr_factor", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--widths", type=_int_list, metavar="W1,W2,...")
    p.add_argument("--hidden", type=_int_list, metavar="H1,H2,...")
    p.add_argument("--naive-p", dest="naive_p",
                   help="constant probability, or 'estimate' for the train base rate")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="stitch a whole-extent susceptibility map")
    p.add_argument("--out", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--core", type=int, default=DEFAULT_CORE)
    p.add_argument("--pad", type=int, default=DEFAULT_PAD)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="NLL and ROC per split from patch cores")
    p.add_argument("--out", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--splits", default="test", metavar="S1,S2,...")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="NLL and ROC of a stitched probability map")
    p.add_argument("--out", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SusmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
