"""Command-line entry point: synth, featgen, train, eval, diagnose.

Log verbosity follows ``GEEGA_LOG_LEVEL`` (DEBUG, INFO, WARNING; default INFO).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import plotting, trainer
from .featuremaps import FeatureSet, featurize
from .signal_io import IngestionError, ingest, load_montage, synthesize, write_binary

logger = logging.getLogger("geega")

ERROR_PREFIX = "geega: error:"
RECORDING_SUFFIXES = (".geeg", ".csv")
FEATURE_FILE = "features.geec"


class CliError(Exception):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


_ACTIVE: list = []


class Manifest:
    """Run manifest, written when a command starts and finalized when it ends."""

    def __init__(self, out_dir: Path, command: str, argv, run_cfg, seed, inputs=()):
        self.path = out_dir / f"manifest_{command}.json"
        self.t0 = time.time()
        _ACTIVE.append(self)
        self.data = {
            "command": command, "argv": list(argv), "seed": seed, "status": "running",
            "config": {k: v for k, v in run_cfg.flat().items()},
            "inputs": {str(p): _sha256(p) for p in inputs},
            "outputs": {}, "notes": {},
        }
        self._write()

    def output(self, path):
        self.data["outputs"][str(path)] = _sha256(path)

    def finish(self, status="ok"):
        self.data["status"] = status
        self.data["timings"] = {"wall_seconds": round(time.time() - self.t0, 3)}
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return out


def _load_config(args):
    run = cfgmod.load(args.config)
    if getattr(args, "seed", None) is not None:
        run.train.seed = args.seed
    return run


# --------------------------------------------------------------------------

def cmd_synth(args, argv):
    run = _load_config(args)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else 0
    man = Manifest(out, "synth", argv, run, seed)
    paths = []
    for rec in synthesize(run.synth, seed):
        label = int(rec.label_track[0] > 5)
        path = out / f"{rec.subject_id}_class{label}.geeg"
        write_binary(rec, path)
        man.output(path)
        paths.append(path)
    logger.info("wrote %d recordings to %s", len(paths), out)
    man.finish()
    return 0


def _recording_files(in_dir: Path):
    if not in_dir.is_dir():
        raise CliError(f"{in_dir}: not a directory")
    files = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in RECORDING_SUFFIXES)
    if not files:
        raise CliError(f"{in_dir}: no .geeg or .csv recordings found")
    return files


def cmd_featgen(args, argv):
    run = _load_config(args)
    if args.no_notch:
        run.features.use_notch = False
    files = _recording_files(Path(args.input))
    out = _out_dir(args.out)
    man = Manifest(out, "featgen", argv, run, None, files)
    man.data["notes"]["notch"] = "skipped" if not run.features.use_notch else f"{run.features.notch_hz} Hz"
    montage = load_montage(args.montage) if args.montage else None
    parts = []
    for path in files:
        try:
            rec = ingest(path, label_scheme=args.label_scheme)
        except IngestionError as exc:
            raise CliError(str(exc)) from None
        try:
            m = montage.subset(rec.channels) if montage is not None else None
            fs = featurize(rec, run.features, m)
        except ValueError as exc:
            raise CliError(f"{path}: {exc}") from None
        logger.info("%s: %d segments", path.name, len(fs))
        man.data["notes"].setdefault("segments", {})[path.name] = len(fs)
        parts.append(fs)
    if len({p.spectro.shape[1] for p in parts}) > 1:
        raise CliError("recordings have differing channel counts; split them into separate inputs")
    features = FeatureSet.concat(parts)
    if len(features) == 0:
        raise CliError("no complete windows in any recording")
    dest = out / FEATURE_FILE
    features.save(dest, meta={"bands": [b.name for b in run.features.bands]})
    man.output(dest)
    fig = out / "topomap_preview.png"
    plotting.topomap_preview(features.topo[0], [b.name for b in run.features.bands], fig,
                             title=f"{features.subjects[0]} segment 0, label {features.labels[0]}")
    man.output(fig)
    man.finish()
    return 0


def _feature_path(p) -> Path:
    p = Path(p)
    if p.is_dir():
        p = p / FEATURE_FILE
    if not p.is_file():
        raise CliError(f"{p}: feature cache not found (run featgen first)")
    return p


def cmd_train(args, argv):
    run = _load_config(args)
    for name in args.ablate or []:
        setattr(run.train, f"use_{name}", False)
    if args.model:
        run.train.model = args.model
    feat_path = _feature_path(args.features)
    features = FeatureSet.load(feat_path)
    out = _out_dir(args.out)
    man = Manifest(out, "train", argv, run, run.train.seed, [feat_path])
    torch.use_deterministic_algorithms(True)
    try:
        result = trainer.loso(features, run.train)
    except (trainer.ProtocolError, ValueError) as exc:
        raise CliError(str(exc)) from None

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        for rec in result.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    man.output(metrics_path)

    pooled = []
    for k, fold in enumerate(result.folds):
        fold_dir = out / f"fold{k:02d}_{fold.test_subject}"
        fold_dir.mkdir(exist_ok=True)
        ckpt = fold_dir / "checkpoint.geec"
        trainer.save_fold_checkpoint(fold, run.train, ckpt)
        log = fold_dir / "conflicts.csv"
        trainer.write_conflict_log(fold.conflicts, log)
        plotting.conflict_heatmap(fold.conflicts, fold_dir / "conflict_heatmap.png",
                                  title=f"held-out {fold.test_subject}")
        plotting.loss_curves(fold.epochs, fold_dir / "loss_curves.png")
        for p in (ckpt, log):
            man.output(p)
        pooled.extend(fold.conflicts)
    report = trainer.conflict_report(pooled)
    trainer.write_conflict_report(report, out / "conflict_report.csv")
    plotting.conflict_fraction_plot(report, out / "conflict_fraction.png")
    man.output(out / "conflict_report.csv")

    summary = result.summary()
    label = ",".join(summary["ablations"]) or "none"
    print(f"ablations={label} accuracy={summary['accuracy']} f1={summary['f1']}")
    man.finish()
    return 0


def cmd_eval(args, argv):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"{ckpt}: checkpoint not found")
    feat_path = _feature_path(args.features)
    features = FeatureSet.load(feat_path)
    if args.subject:
        idx = [i for i, s in enumerate(features.subjects) if s in set(args.subject)]
        if not idx:
            raise CliError(f"no segments for subjects {args.subject}")
        features = features.take(idx)
    model, tcfg, norms = trainer.load_fold_checkpoint(ckpt)
    acc, f1 = trainer.evaluate(model, features, norms)
    result = {"checkpoint": str(ckpt), "features": str(feat_path), "n": len(features), "accuracy": acc, "f1": f1}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        out = _out_dir(args.out)
        (out / "eval.json").write_text(json.dumps(result, sort_keys=True) + "\n")
    return 0


def cmd_diagnose(args, argv):
    log = Path(args.log)
    if not log.is_file():
        raise CliError(f"{log}: conflict log not found")
    records = trainer.read_conflict_log(log)
    if not records:
        raise CliError(f"{log}: conflict log is empty")
    out = _out_dir(args.out)
    report = trainer.conflict_report(records)
    trainer.write_conflict_report(report, out / "conflict_report.csv")
    plotting.conflict_heatmap(records, out / "conflict_heatmap.png")
    plotting.conflict_fraction_plot(report, out / "conflict_fraction.png")
    for pair, by_epoch in report.items():
        first, last = trainer.window_fraction({pair: by_epoch}, True), trainer.window_fraction({pair: by_epoch}, False)
        print(f"{pair}: conflict fraction first-5 {first:.3f} last-5 {last:.3f}")
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geega", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, out_required=True):
        p.add_argument("--config", type=Path, help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="write synthetic recordings")
    shared(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featgen", help="filter, segment and build topomaps + spectrograms")
    p.add_argument("input", help="directory of .geeg/.csv recordings")
    shared(p)
    p.add_argument("--no-notch", action="store_true")
    p.add_argument("--montage", help="built-in montage name or montage file")
    p.add_argument("--label-scheme", choices=("score", "binary"), default="score")
    p.set_defaults(func=cmd_featgen)

    p = sub.add_parser("train", help="leave-one-subject-out training")
    p.add_argument("--features", required=True, help="feature cache file or featgen output directory")
    shared(p)
    p.add_argument("--ablate", action="append", choices=("git", "align", "topo", "spectro"))
    p.add_argument("--model", choices=("desk", "full"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a feature cache")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--subject", action="append", help="restrict to these subjects")
    shared(p, out_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="conflict report and heatmap from a conflict log")
    p.add_argument("--log", required=True, help="conflicts.csv written by train")
    shared(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("GEEGA_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except (CliError, cfgmod.ConfigError, trainer.TrainingError) as exc:
        for man in _ACTIVE:
            if man.data["status"] == "running":
                man.data["error"] = str(exc)
                man.finish("error")
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 1
    finally:
        _ACTIVE.clear()


if __name__ == "__main__":
    sys.exit(main())
