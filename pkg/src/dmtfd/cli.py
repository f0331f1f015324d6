"""dmtfd command line: synth, train, eval, score, verify.

Exit codes: 0 success, 1 usage or config error, 2 data-contract error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .dataio import (
    DataError,
    MissingLabelColumn,
    TimeSeriesDataset,
    load_csv,
    slide_windows,
    split,
    split_lengths,
    synth_multimanifold,
    write_csv,
    zscore_normalize,
)
from .diffnet import NonFiniteError
from .metrics import EvalReport, write_scores
from .train import _threads, load_model, run_pipeline, save_model, score_windows, version_string

log = logging.getLogger("dmtfd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_MANIFEST_FORMAT = 1
LOCK_NAME = ".dmtfd.lock"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def out_lock(directory: Path):
    """Refuse to share an output directory with a concurrent run."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _write_run_manifest(directory: Path, command: str, cfg: config_mod.RunConfig, inputs: dict, extra=None):
    manifest = {
        "format": RUN_MANIFEST_FORMAT,
        "command": command,
        "version": version_string(),
        "seed": cfg.seed,
        "config": config_mod.dumps(cfg),
        "inputs": inputs,
        **(extra or {}),
    }
    (directory / f"{command}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    _require(args, "out")
    cfg = _load_config(args)
    out = Path(args.out)
    csv_path = out if out.suffix == ".csv" else out / f"{cfg.name}.csv"
    with out_lock(csv_path.parent):
        ds = synth_multimanifold(
            cfg.synth_modes, cfg.synth_entities, cfg.synth_length, cfg.synth_anomaly_rate, cfg.seed
        )
        write_csv(ds, csv_path, cfg.label_column)
        sidecar = {
            "source": ds.source_name,
            "seed": cfg.seed,
            "n_modes": cfg.synth_modes,
            "n_entities": cfg.synth_entities,
            "length": cfg.synth_length,
            "anomaly_rate": cfg.synth_anomaly_rate,
            "anomalies": ds.meta["anomalies"],
        }
        csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {csv_path} ({ds.n_entities} sensors, {ds.length} rows, {int(ds.labels.sum())} anomalous)")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data")
    if args.checkpoint is None and args.out is None:
        raise UsageError("train needs --checkpoint or --out")
    cfg = _load_config(args)
    tcfg = cfg.to_train_config()
    ds = load_csv(args.data, cfg.label_column)
    target = Path(args.checkpoint or args.out)
    with out_lock(target):
        result = run_pipeline(ds, tcfg, workers=_threads())
        manifest = result.manifest
        manifest["run_config"] = config_mod.dumps(cfg)
        manifest["data"] = {"path": str(args.data), "n_entities": ds.n_entities, "length": ds.length,
                            "dropped_rows": ds.dropped_rows}
        save_model(result.model, tcfg, result.stats, target, manifest,
                   extra_meta={"run_config": config_mod.dumps(cfg), "entity_names": ds.entity_names})
    msg = f"final loss {manifest['final_loss']:.6g}"
    if "test_metrics" in manifest:
        msg += f", test AUROC {manifest['test_metrics']['auroc']:.4f}"
    print(f"checkpoint written to {target}: {msg}")
    return EXIT_OK


def _load_for_inference(args, require_label: bool):
    _require(args, "checkpoint", "data", "out")
    model, tcfg, stats, meta = load_model(args.checkpoint)
    run_cfg = config_mod.parse(meta["run_config"]) if "run_config" in meta else config_mod.RunConfig()
    if args.config:
        run_cfg = config_mod.load(args.config)
    ds = load_csv(args.data, run_cfg.label_column, require_label=require_label)
    want_k, want_t = model.n_entities, model.window_size
    if ds.n_entities != want_k:
        raise DataError(
            f"checkpoint expects K={want_k} entities and T={want_t}; data has K={ds.n_entities} entities"
        )
    if ds.length < want_t:
        raise DataError(f"checkpoint expects windows of T={want_t}; data has only {ds.length} rows")
    return model, tcfg, stats, run_cfg, ds


def cmd_eval(args) -> int:
    model, tcfg, stats, run_cfg, ds = _load_for_inference(args, require_label=True)
    test_ds = split(ds, tcfg.split_spec)[2]
    test = slide_windows(zscore_normalize(test_ds, stats), tcfg.window_size, tcfg.stride)
    n_pos = int(test.window_labels.sum())
    if n_pos == 0 or n_pos == len(test):
        raise DataError(f"test split has a single class ({n_pos} of {len(test)} windows anomalous)")
    scores = score_windows(model, test, workers=_threads())
    report = EvalReport.from_scores(scores, test.window_labels, test.window_starts + split_offset(ds, tcfg))
    out = Path(args.out)
    with out_lock(out):
        report.write(out)
        _write_run_manifest(out, "eval", run_cfg, {"checkpoint": str(args.checkpoint), "data": str(args.data)},
                            {"metrics": report.metrics()})
    print(f"AUROC {report.auroc:.4f}  AUPRC {report.auprc:.4f}  ({len(scores)} windows, {n_pos} anomalous)")
    return EXIT_OK


def split_offset(ds: TimeSeriesDataset, tcfg) -> int:
    """Row index where the test split begins."""
    n_train, n_val, _ = split_lengths(ds.length, tcfg.split_spec)
    return n_train + n_val


def cmd_score(args) -> int:
    model, tcfg, stats, run_cfg, ds = _load_for_inference(args, require_label=False)
    windows = slide_windows(zscore_normalize(ds, stats), tcfg.window_size, tcfg.stride)
    scores = score_windows(model, windows, workers=_threads())
    labels = windows.window_labels if ds.meta.get("labelled", True) else None
    out = Path(args.out)
    with out_lock(out):
        write_scores(out / "scores.csv", windows.window_starts, scores, labels)
        _write_run_manifest(out, "score", run_cfg, {"checkpoint": str(args.checkpoint), "data": str(args.data)},
                            {"n_windows": len(scores)})
    print(f"scored {len(scores)} windows -> {out / 'scores.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .propcheck import run_all

    seed = 0 if args.seed is None else args.seed
    report = run_all(seed, corrupt_logdet=args.corrupt_logdet)
    print(report.table())
    if args.out:
        out = Path(args.out)
        with out_lock(out):
            (out / "propcheck_report.json").write_text(report.to_json())
    failed = report.hard_failures
    if failed:
        print(f"{len(failed)} hard check(s) failed: {', '.join(c.name for c in failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print("all hard checks passed")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "score": cmd_score, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmtfd", description="Unsupervised fault detection for multivariate time series.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth": "write a synthetic multi-regime dataset (CSV + anomaly sidecar JSON)",
        "train": "train on the train split of a CSV and write a checkpoint",
        "eval": "evaluate a checkpoint on the test split of a labelled CSV",
        "score": "write anomaly scores for every window of a CSV",
        "verify": "run the numerical property checks",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--data", type=Path, help="input CSV")
        sp.add_argument("--out", type=Path, help="output directory (synth: directory or .csv path)")
        sp.add_argument("--checkpoint", type=Path, help="checkpoint directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if name == "verify":
            # test hook: offset the analytic log-det so the gate must trip
            sp.add_argument("--corrupt-logdet", type=float, default=0.0, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, config_mod.ConfigError, MissingLabelColumn) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
