"""``neurotype`` command line: ingest, train, eval, synth.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Relative ``--out-dir`` paths are resolved under ``$NEUROTYPE_OUT_ROOT`` when set.
"""
import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import datapipe as dp
from . import evalkit, trainer
from . import lspin as lspin_mod
from .errors import NeurotypeError, ValidationError

log = logging.getLogger("neurotype")

OUT_ROOT_ENV = "NEUROTYPE_OUT_ROOT"


def _out_dir(path):
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def sha256_of(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config, seed, inputs, artifacts, started):
    manifest = {
        "format": "neurotype-manifest",
        "version": 1,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_of(p) for p in inputs},
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "wall_clock_seconds": round(time.time() - started, 3),
        "library_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ingest

def cmd_ingest(args):
    started = time.time()
    out = _out_dir(args.out_dir)
    schema = dp.FeatureSchema.from_file(args.schema) if args.schema else dp.FeatureSchema()
    data = dp.load_table(args.input, schema)
    log.info("loaded %d samples from %s", len(data), args.input)
    inputs = [args.input]
    cre_map = None
    if args.cre_map:
        if args.cre_map == "default":
            cre_map = dp.default_cre_map()
        else:
            cre_map = dp.load_cre_map(args.cre_map)
            inputs.append(args.cre_map)
        data = dp.group_cre_lines(data, cre_map)
        log.info("grouped Cre lines: %d samples kept, %d unmapped dropped",
                 len(data), data.meta["unmapped_dropped"])
    data, excluded = dp.exclude_nan(data)
    log.info("excluded %d samples with NaN features, %d retained", excluded, len(data))
    stratify = args.stratify
    if stratify == "auto":
        stratify = "subclass" if cre_map is not None or np.all(data.subclass >= 0) else "dendrite"
        if stratify == "dendrite" and np.any(data.dendrite < 0):
            stratify = None
    spec = dp.SplitSpec.parse(args.splits, seed=args.seed,
                              stratify_on=None if stratify == "none" else stratify)
    parts = dp.split(data, spec)
    stats = dp.fit_normalize(parts["train"])
    if np.any(stats.constant):
        log.warning("constant features mapped to 0: %s",
                    [n for n, c in zip(stats.feature_names, stats.constant) if c])
    artifacts = {}
    for name, part in parts.items():
        artifacts[name] = dp.save_table(dp.apply_normalize(part, stats), out / f"{name}.csv")
        log.info("%s: %d samples", name, len(part))
    stats.save(out / "norm_stats.json")
    artifacts["norm_stats"] = out / "norm_stats.json"
    (out / "schema.json").write_text(json.dumps(
        {"names": list(schema.names), "hash": schema.hash}, indent=2) + "\n")
    artifacts["schema"] = out / "schema.json"
    summary = {"loaded": len(data) + excluded, "excluded_nan": excluded,
               "unmapped_dropped": data.meta.get("unmapped_dropped", 0),
               "counts": {k: len(v) for k, v in parts.items()}, "stratify_on": spec.stratify_on}
    (out / "ingest_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    artifacts["summary"] = out / "ingest_summary.json"
    write_manifest(out, "ingest", {"splits": args.splits, "stratify_on": spec.stratify_on,
                                   "cre_map": args.cre_map, "schema_hash": schema.hash},
                   args.seed, inputs, artifacts, started)
    print(json.dumps(summary))
    return 0


# train

def _read_split(data_dir, name, schema_names):
    path = Path(data_dir) / f"{name}.csv"
    if not path.exists():
        return None
    return dp.load_table(path, dp.FeatureSchema(schema_names))


def _schema_names(data_dir):
    path = Path(data_dir) / "schema.json"
    if path.exists():
        return tuple(json.loads(path.read_text())["names"])
    return dp.feature_columns_of(Path(data_dir) / "train.csv")


def cmd_train(args):
    started = time.time()
    if args.config:
        config = trainer.TrainConfig.load(args.config)
    else:
        config = trainer.default_config(args.model)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides or config.model != args.model:
        if config.model != args.model:
            raise ValidationError(f"--model {args.model} but config is for {config.model!r}")
        config = trainer.TrainConfig.from_dict({**config.to_dict(), **overrides})
    data_dir = Path(args.data_dir)
    if not (data_dir / "train.csv").exists():
        raise ValidationError(f"{data_dir}: no train.csv (run `neurotype ingest` first)")
    names = _schema_names(data_dir)
    splits = {"train": _read_split(data_dir, "train", names)}
    val = _read_split(data_dir, "validation", names)
    if val is not None:
        splits["validation"] = val
    stats_path = data_dir / "norm_stats.json"
    stats_ref = ({"path": str(stats_path), "sha256": sha256_of(stats_path)}
                 if stats_path.exists() else None)
    out = _out_dir(args.out_dir)
    log.info("training %s for %d epochs (lr=%g, seed=%d) on %d samples",
             config.model, config.epochs, config.learning_rate, config.seed,
             len(splits["train"]))

    def progress(rec):
        if rec.epoch == 1 or rec.epoch % max(1, config.epochs // 10) == 0:
            log.info("epoch %d loss %.5f val %.4f", rec.epoch, rec.train_loss,
                     rec.validation_metric)

    try:
        result, history = trainer.train(config, splits, stats_ref, log=progress)
    except trainer.DivergenceError as exc:
        if exc.history is not None:
            exc.history.write_csv(out / "history.csv")
        raise
    artifacts = {
        "checkpoint": trainer.save_checkpoint(result["final"], out / "checkpoint.json"),
        "checkpoint_best": trainer.save_checkpoint(result["best"], out / "checkpoint_best.json"),
        "history": history.write_csv(out / "history.csv"),
    }
    if not args.no_plots:
        from . import plotting

        artifacts["history_png"] = plotting.plot_history(history, out / "history.png",
                                                         config.model)
    inputs = [data_dir / "train.csv"] + ([data_dir / "validation.csv"] if val is not None else [])
    write_manifest(out, "train", config.to_dict(), config.seed, inputs, artifacts, started)
    last = history.records[-1]
    print(json.dumps({"epochs": len(history), "train_loss": last.train_loss,
                      "validation_metric": last.validation_metric}))
    return 0


# eval

def cmd_eval(args):
    started = time.time()
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model = ckpt["model"]
    if args.export_gates and model != "lspin":
        raise ValidationError("--export-gates only applies to lspin checkpoints")
    data_names = dp.feature_columns_of(args.data)
    data_hash = dp.schema_hash(data_names)
    if data_hash != ckpt["schema"]["hash"]:
        raise ValidationError(f"schema mismatch: checkpoint {ckpt['schema']['hash']} vs data "
                              f"{data_hash}")
    data = dp.load_table(args.data, dp.FeatureSchema(data_names))
    if len(data) == 0:
        raise ValidationError(f"{args.data}: no samples to evaluate")
    if not np.all(np.isfinite(data.X)):
        raise ValidationError(f"{args.data}: NaN features present; run ingest first")
    params = trainer.params_from_checkpoint(ckpt)
    out = _out_dir(args.out_dir)
    plots = not args.no_plots
    y = trainer.target_labels(model, data)
    if np.any(y < 0):
        raise ValidationError(f"{args.data}: {int(np.sum(y < 0))} samples lack the target label")
    pred = trainer.predict(model, params, data.X)
    artifacts, summary = {}, {}
    if model == "dann":
        groups = [("all", np.ones(len(data), dtype=bool))]
        groups += [(org, data.organism == org) for org in dp.ORGANISMS
                   if np.any(data.organism == org)]
        for name, mask in groups:
            report = evalkit.evaluate(y[mask], pred[mask], 2, dp.BROAD_TYPES, positive=1)
            paths = evalkit.render_reports(report, out, prefix=f"{name}_", plots=plots,
                                           title=f"{name} ({mask.sum()} cells)")
            artifacts.update({f"{name}_{k}": v for k, v in paths.items()})
            summary[name] = {"accuracy": report.accuracy, **{
                k: report.binary[k] for k in ("precision", "recall", "f1")}}
    else:
        k = ckpt["config"]["lspin"]["n_classes"]
        names = dp.SUBCLASSES[:k] if k <= len(dp.SUBCLASSES) else None
        report = evalkit.evaluate(y, pred, k, names)
        gates = lspin_mod.export_gate_matrix(params, data.X) if args.export_gates else None
        class_name = (lambda i: names[i]) if names else str
        paths = evalkit.render_reports(
            report, out, gate_matrix=gates, feature_names=data_names, sample_ids=data.sample_id,
            predicted=[class_name(i) for i in pred], true=[class_name(i) for i in y],
            plots=plots)
        artifacts.update(paths)
        summary["all"] = {"accuracy": report.accuracy, "macro_f1": report.macro_f1,
                          "macro_precision": report.macro_precision,
                          "macro_recall": report.macro_recall}
    write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "model": model,
                                 "export_gates": bool(args.export_gates)},
                   ckpt["config"]["seed"], [args.checkpoint, args.data], artifacts, started)
    print(json.dumps(summary))
    return 0


# synth

def cmd_synth(args):
    started = time.time()
    out = _out_dir(args.out_dir)
    if args.task == "blobs":
        data = dp.synth_blobs(n=args.n, d_informative=args.d_informative,
                              d_noise=41 - args.d_informative, classes=args.classes,
                              separation=args.separation, seed=args.seed)
    else:
        data = dp.synth_shifted_domains(n_source=args.n_source, n_target=args.n_target,
                                        shift=args.shift, seed=args.seed,
                                        d_informative=args.d_informative,
                                        d_noise=41 - args.d_informative,
                                        separation=args.separation)
    artifacts = {"data": dp.save_table(data, out / "data.csv")}
    (out / "truth.json").write_text(json.dumps(data.meta, indent=2, sort_keys=True) + "\n")
    artifacts["truth"] = out / "truth.json"
    write_manifest(out, "synth", {k: v for k, v in vars(args).items() if k != "func"},
                   args.seed, [], artifacts, started)
    print(json.dumps({"samples": len(data), "task": args.task}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="neurotype", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"neurotype {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="clean, group, split and normalize a feature CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", help="JSON list of feature column names (default: 41 ACTB features)")
    p.add_argument("--cre-map", help="Cre-line mapping JSON, or 'default' for the shipped one")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", default="0.8/0.1/0.1",
                   help="train/val/test fractions or counts, e.g. 0.8/0.1/0.1 or 1105/0/277")
    p.add_argument("--stratify", default="auto",
                   choices=["auto", "none", "subclass", "dendrite", "organism"])
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model on ingested splits")
    p.add_argument("--model", required=True, choices=trainer.MODELS)
    p.add_argument("--config", help="training config JSON (default: shipped config for --model)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--export-gates", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic verification dataset")
    p.add_argument("--task", required=True, choices=["blobs", "shift"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--d-informative", type=int, default=5)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--n-source", type=int, default=500)
    p.add_argument("--n-target", type=int, default=500)
    p.add_argument("--shift", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "separation", 0) is None:
        args.separation = 4.0 if args.task == "blobs" else 2.0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NeurotypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
