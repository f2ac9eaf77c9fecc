"""``seanet`` command line: prepare, train, eval, gradcheck, features.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 incompatible artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, gradcheck, nn
from . import tensor as T
from . import train as tr
from .config import RunConfig, RunConfigError
from .losses import ClassWeights
from .metrics import ConfusionMatrix, MetricError, roc_curves, summarize, write_roc_csv

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4

log = logging.getLogger("seanet")


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _run_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, value in (args.set or []):
        cfg.set(key, value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision is not None:
        cfg.precision = args.precision
    for flag, key in (("placement", "placement"), ("lam", "lam"), ("epochs", "epochs"), ("cache_dir", "cache_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(key, value)
    if getattr(args, "freeze_backbone", False):
        cfg.freeze_backbone = True
    if getattr(args, "feature_dim", None) is not None:
        cfg.feature_dim = args.feature_dim
    T.set_precision(cfg.precision)
    return cfg


def _cache_dir(args, cfg):
    path = Path(cfg.cache_dir)
    if not (path / "manifest.csv").exists():
        raise CliError(f"no prepared cache at {path} (run `seanet prepare` first)")
    return path


# ---------------------------------------------------------------- commands


def cmd_prepare(args):
    cfg = _run_config(args)
    out = Path(args.out_dir or cfg.cache_dir)
    if args.manifest:
        try:
            manifest = data.DatasetManifest.read_csv(args.manifest)
        except (OSError, data.DataError) as exc:
            raise CliError(f"cannot read manifest: {exc}") from None
    else:
        manifest = data.synth_manifest(
            cfg.synth_classes, cfg.synth_train_per_class, cfg.synth_test_per_class, cfg.synth_seed
        )
        cfg.num_classes = cfg.synth_classes
    if len(manifest) == 0:
        raise CliError("manifest is empty")
    missing = data.missing_sources(manifest)
    if missing:
        raise CliError("missing image files:\n  " + "\n  ".join(missing))
    try:
        manifest.validate(cfg.num_classes, balanced_test=cfg.balanced_test)
        weights = ClassWeights.from_counts(manifest.class_counts("train", cfg.num_classes))
        stats = data.prepare_cache(manifest, out, cfg.image_size, cfg.num_classes, cfg.crop_threshold)
    except (data.DataError, ValueError) as exc:
        raise CliError(str(exc)) from None
    weights.write_csv(out / "class_weights.csv")
    cfg.cache_dir = str(out)
    cfg.save(out / "config.txt")
    print(
        f"prepared {len(manifest)} images into {out}; channel means {np.round(stats.mean, 3).tolist()}, "
        f"class weights {[float(w) for w in weights.exact]}"
    )
    return EXIT_OK


def _load_sets(cache):
    dtype = T.get_dtype()
    return data.load_cache(cache, "train", dtype), data.load_cache(cache, "test", dtype)


def cmd_train(args):
    cfg = _run_config(args)
    cache = _cache_dir(args, cfg)
    run_dir = Path(args.out_dir or "run")
    run_dir.mkdir(parents=True, exist_ok=True)
    train_set, test_set = _load_sets(cache)
    if len(train_set) == 0:
        raise CliError("cache has no training images")
    try:
        weights = ClassWeights.from_labels(train_set.labels, cfg.num_classes)
        model_cfg = cfg.model_config().validate()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    history = []
    state = None
    if args.resume:
        try:
            model, state = tr.load_state(args.resume, model_cfg)
        except nn.CheckpointError as exc:
            raise CliError(str(exc), EXIT_INCOMPATIBLE) from None
        metrics_path = run_dir / "metrics.csv"
        if metrics_path.exists():
            history = [r for r in tr.read_history(metrics_path) if r.epoch <= state.epoch]
    else:
        model = nn.build_model(model_cfg, cfg.seed)
    cfg.save(run_dir / "config.txt")
    try:
        state, new = tr.train(
            model,
            train_set,
            cfg.loss_config(weights),
            cfg.sgd_config(),
            cfg.epochs,
            cfg.seed,
            eval_set=test_set,
            policy=cfg.augment_policy(),
            out_dir=run_dir,
            state=state,
            center_alpha=cfg.center_alpha,
        )
    except tr.TrainingError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERIC
    history += new
    tr.write_history(run_dir / "metrics.csv", history)
    final = history[-1]
    summary = {
        "epoch": final.epoch,
        "test": {"aca": final.aca, "macro_f1": final.macro_f1, "auc": final.auc},
        "train": tr.evaluate(model, train_set),
        "best_epoch": state.best_epoch,
        "best_aca": state.best_metric,
    }
    with open(run_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"ACA {final.aca:.4f}  Macro-F1 {final.macro_f1:.4f}  AUC {final.auc:.4f}")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        model, _, _ = nn.load_checkpoint(path)
    except nn.CheckpointError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE) from None
    return model


def _checked_predict(model, dataset):
    if dataset.images.ndim != 4 or dataset.images.shape[3] != model.config.in_channels:
        raise CliError(
            f"checkpoint expects {model.config.in_channels}-channel images, cache holds shape {dataset.images.shape[1:]}",
            EXIT_INCOMPATIBLE,
        )
    try:
        return tr.predict(model, dataset.images)
    except T.DimensionError as exc:
        raise CliError(f"checkpoint incompatible with cached images: {exc}", EXIT_INCOMPATIBLE) from None


def cmd_eval(args):
    cfg = _run_config(args)
    cache = _cache_dir(args, cfg)
    out = Path(args.out_dir or "eval")
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        dataset = data.load_cache(cache, args.split)
        k = cfg.num_classes
        probs = np.eye(k)[dataset.labels]
    else:
        model = _load_checkpoint(args.checkpoint)
        k = model.config.num_classes
        dataset = data.load_cache(cache, args.split, model.params["head.w"].dtype)
        probs, _ = _checked_predict(model, dataset)
    if len(dataset) == 0:
        raise CliError(f"no {args.split} images in {cache}")
    try:
        summary = summarize(probs, dataset.labels, k)
    except MetricError as exc:
        raise CliError(str(exc)) from None
    with open(out / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    write_roc_csv(out / "roc.csv", roc_curves(probs, dataset.labels))
    ConfusionMatrix(np.array(summary["confusion_matrix"])).write_csv(out / "confusion.csv")
    print(f"ACA {summary['aca']:.4f}  Macro-F1 {summary['macro_f1']:.4f}  AUC {summary['auc']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _run_config(args)
    placements = [nn.Placement.parse(args.placement)] if args.placement else list(nn.Placement)
    results = gradcheck.run(
        placements,
        batch=cfg.gradcheck_batch,
        size=cfg.gradcheck_size,
        channels=cfg.gradcheck_channels,
        num_classes=cfg.num_classes,
        entries=cfg.gradcheck_entries,
        seed=cfg.seed,
    )
    print(gradcheck.format_report(results, cfg.gradcheck_tolerance))
    worst = max(r.worst_rel for r in results)
    ok = worst < cfg.gradcheck_tolerance
    print(f"worst relative error {worst:.3e} ({'pass' if ok else 'FAIL'}, tolerance {cfg.gradcheck_tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_features(args):
    cfg = _run_config(args)
    cache = _cache_dir(args, cfg)
    model = _load_checkpoint(args.checkpoint)
    dataset = data.load_cache(cache, args.split, model.params["head.w"].dtype)
    _, feats = _checked_predict(model, dataset)
    manifest = data.DatasetManifest.read_csv(cache / "manifest.csv")
    ids = manifest.indices(args.split)
    out = Path(args.out or Path(args.out_dir or ".") / "features.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"] + [f"f{j}" for j in range(feats.shape[1])])
        for i, label, row in zip(ids, dataset.labels, feats):
            w.writerow([i, int(label)] + [repr(float(v)) for v in row])
    print(f"wrote {len(ids)} feature rows ({feats.shape[1]} dims) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--cache-dir", dest="cache_dir", help="preprocessed image cache")
    common.add_argument("--set", nargs=2, action="append", metavar=("KEY", "VALUE"), help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="seanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="preprocess a manifest (or a synthetic set) into a cache")
    p.add_argument("--manifest", help="CSV with columns source,label,split; omit for the synthetic set")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a model on a prepared cache")
    p.add_argument("--placement", choices=[pl.value for pl in nn.Placement])
    p.add_argument("--lambda", dest="lam", type=float, help="center-loss weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--feature-dim", type=int, help="add an embedding of this width before the classifier")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--oracle", action="store_true", help="score one-hot true labels instead of a model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every parameter group")
    p.add_argument("--placement", choices=[pl.value for pl in nn.Placement])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("features", parents=[common], help="export per-sample deep features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="CSV path (default OUT_DIR/features.csv)")
    p.set_defaults(func=cmd_features)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval" and not args.oracle and not args.checkpoint:
        parser.error("eval needs --checkpoint (or --oracle)")
    try:
        return args.func(args)
    except (CliError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except RunConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except nn.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except T.NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
