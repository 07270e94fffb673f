"""Command-line entry point: ``ecgseg <command> [options]``.

Every command resolves its configuration as flags > config file > defaults,
writes its outputs plus a ``<command>_manifest.json`` into ``--out``, and
skips work when a previous manifest shows identical inputs and config.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import SPLIT_MODES, load_segments, save_segments, split_records, stratified_kfold
from .evaluation import BeatMatchResult, EvalReport, beat_table, boundary_table, sample_report
from .nn import Model, ModelConfig
from .pipeline import (
    DatasetLayoutError,
    PrepConfig,
    check_layout,
    delineate,
    evaluate_boundaries_record,
    evaluate_qrs_record,
    load_records,
    preprocess_directory,
)
from .train import (
    SearchSpace,
    TrainConfig,
    TrainingDiverged,
    fit,
    load_checkpoint,
    random_search,
    run_cv,
    save_checkpoint,
)

log = logging.getLogger("ecgseg.cli")

DATA_ROOT_ENV = "ECGSEG_DATA"
MANIFEST_VERSION = 1
DELIMITERS = {"comma": ",", "tab": "\t", "semicolon": ";"}

# section -> key -> default; the default's type drives parsing
DEFAULTS: dict[str, dict[str, object]] = {
    "paths": {"data_root": "", "qtdb": "", "mitdb": "", "cache": "", "split": "", "checkpoint": "", "out": ""},
    "prep": {
        "channel": 0,
        "annotators": "q1c,pu0",
        "filter_order": 3,
        "low_cut": 0.5,
        "high_cut": 40.0,
        "normalize": False,
        "crop_to_annotations": False,
    },
    "split": {"seed": 0, "mode": "84/21", "folds": 5},
    "model": {"conv_filters": "32,64,128", "kernel_size": 3, "lstm_units": "250,125", "dropout": 0.2},
    "train": {
        "alpha": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "batch_size": 32,
        "max_epochs": 100,
        "patience": 3,
        "min_delta": 0.0,
        "seed": 0,
        "dtype": "float32",
    },
    "search": {"trials": 10, "seed": 0, "max_epochs": 5},
    "eval": {"tolerance": 0.150},
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def _coerce(section: str, key: str, value):
    default = DEFAULTS[section][key]
    if isinstance(value, type(default)) and not (isinstance(default, int) and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def load_config(path: str | None, overrides: dict[str, object]) -> dict[str, dict[str, object]]:
    """Defaults, then the INI-style file, then ``section.key`` overrides."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]; known: {', '.join(DEFAULTS)}")
            for key, value in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                cfg[section][key] = _coerce(section, key, value)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting {dotted!r}")
        cfg[section][key] = _coerce(section, key, value)
    if not cfg["paths"]["data_root"]:
        cfg["paths"]["data_root"] = os.environ.get(DATA_ROOT_ENV, "")
    return cfg


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def prep_config(cfg) -> PrepConfig:
    p = cfg["prep"]
    prep = PrepConfig(
        channel=p["channel"],
        annotators=tuple(a.strip() for a in p["annotators"].split(",") if a.strip()),
        filter_order=p["filter_order"],
        low_cut=p["low_cut"],
        high_cut=p["high_cut"],
        normalize=p["normalize"],
        crop_to_annotations=p["crop_to_annotations"],
    )
    try:
        prep.filter_spec().validate()
    except ValueError as exc:
        raise ConfigError(f"[prep] {exc}") from None
    if prep.channel < 0 or not prep.annotators:
        raise ConfigError("[prep] channel must be ≥ 0 and annotators non-empty")
    return prep


def model_config(cfg) -> ModelConfig:
    m = cfg["model"]
    conf = ModelConfig(
        conv_filters=_ints(m["conv_filters"]),
        kernel_size=m["kernel_size"],
        lstm_units=_ints(m["lstm_units"]),
        dropout=m["dropout"],
    )
    if conf.kernel_size < 1 or not 0 <= conf.dropout < 1 or any(v < 1 for v in conf.conv_filters + conf.lstm_units):
        raise ConfigError(f"[model] invalid architecture {conf}")
    return conf


def train_config(cfg, **changes) -> TrainConfig:
    try:
        conf = TrainConfig(**cfg["train"])
        return replace(conf, **changes) if changes else conf
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None


def config_hash(cfg) -> str:
    relevant = {k: v for k, v in cfg.items() if k != "paths"}
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- manifests


def git_blob_hash(path: Path) -> str:
    """Content hash as computed by ``git hash-object``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths: dict[str, Path]) -> dict[str, str]:
    out = {}
    for label, p in sorted(paths.items()):
        p = Path(p)
        if not p.exists():
            raise DatasetLayoutError(f"input {label} = {p} does not exist")
        out[label] = git_blob_hash(p)
    return out


def record_files(directory: Path, names, exts) -> dict[str, Path]:
    files = {}
    for name in names:
        for ext in ("hea", "dat", *exts):
            p = directory / f"{name}.{ext}"
            if p.exists():
                files[f"{name}.{ext}"] = p
    return files


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, out: Path, cfg, inputs: dict[str, str], seeds: dict, force: bool):
        self.command = command
        self.out = Path(out)
        self.cfg = cfg
        self.inputs = inputs
        self.seeds = seeds
        self.force = force
        self.outputs: list[str] = []

    @property
    def manifest_path(self) -> Path:
        return self.out / f"{self.command}_manifest.json"

    def up_to_date(self) -> bool:
        if self.force or not self.manifest_path.exists():
            return False
        try:
            old = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError:
            return False
        if old.get("config_sha256") != config_hash(self.cfg) or old.get("inputs") != self.inputs:
            return False
        for name, digest in old.get("outputs", {}).items():
            p = self.out / name
            if not p.exists() or git_blob_hash(p) != digest:
                return False
        return True

    def write_text(self, name: str, text: str) -> Path:
        p = self.out / name
        p.write_text(text)
        self.outputs.append(name)
        return p

    def add(self, name: str) -> None:
        self.outputs.append(name)

    def finish(self, extra: dict | None = None) -> None:
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "tool_version": __version__,
            "command": self.command,
            "config": self.cfg,
            "config_sha256": config_hash(self.cfg),
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {n: git_blob_hash(self.out / n) for n in sorted(set(self.outputs))},
        }
        manifest.update(extra or {})
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        log.info("command=%s status=done outputs=%d out=%s", self.command, len(set(self.outputs)), self.out)


def _start(command, args, cfg, inputs, seeds) -> Run | None:
    out = Path(args.out or cfg["paths"]["out"] or ".")
    dataset = getattr(args, "input", None)
    if dataset and out.resolve() == Path(dataset).resolve():
        raise ConfigError("--out must differ from the dataset directory, which is never written to")
    out.mkdir(parents=True, exist_ok=True)
    run = Run(command, out, cfg, inputs, seeds, args.force)
    if run.up_to_date():
        log.info("command=%s status=skipped reason=up_to_date out=%s", command, out)
        return None
    return run


# ----------------------------------------------------------------- helpers


def _dataset_dir(args, cfg, db: str) -> Path:
    if getattr(args, "input", None):
        return Path(args.input)
    if cfg["paths"].get(db):
        return Path(cfg["paths"][db])
    root = cfg["paths"]["data_root"]
    if not root:
        raise DatasetLayoutError(
            f"no {db} directory given; pass --in DIR, set paths.{db} in the config, "
            f"or set {DATA_ROOT_ENV} to a directory containing '{db}/'"
        )
    return Path(root) / db


def _path(args, cfg, attr: str, key: str, what: str) -> Path:
    value = getattr(args, attr, None) or cfg["paths"][key]
    if not value:
        raise ConfigError(f"{what} not given; pass --{attr} or set paths.{key} in the config")
    p = Path(value)
    if not p.exists():
        raise DatasetLayoutError(f"{what} {p} does not exist")
    return p


def _records_arg(args) -> list[str] | None:
    if not getattr(args, "records", None):
        return None
    return [r.strip() for r in args.records.split(",") if r.strip()]


def _load_split(path: Path) -> dict:
    data = json.loads(path.read_text())
    for key in ("train_records", "test_records", "folds"):
        if key not in data:
            raise ConfigError(f"{path}: split file lacks {key!r}")
    return data


def _train_val(segments, split: dict):
    """Training segments of the split; fold 0 validates, the other folds train."""
    train = segments.select_records(split["train_records"])
    folds = split["folds"]
    if len(train) == 0 or not folds:
        raise ConfigError("split selects no training segments")
    val_idx = folds[0]
    fit_idx = sorted(i for f in folds[1:] for i in f)
    return train.subset(fit_idx), train.subset(val_idx)


def _checkpoint_manifest(cfg, prep: PrepConfig, tc: TrainConfig, extra: dict) -> dict:
    return {"prep": prep.to_dict(), "train": tc.to_dict(), "seed": tc.seed, **extra}


def _prep_from_checkpoint(meta: dict, fallback: PrepConfig) -> PrepConfig:
    return PrepConfig.from_dict(meta["prep"]) if "prep" in meta else fallback


# ---------------------------------------------------------------- commands


def cmd_preprocess(args, cfg) -> int:
    prep = prep_config(cfg)
    directory = _dataset_dir(args, cfg, args.db)
    names = _records_arg(args) or check_layout(directory, args.db)
    inputs = hash_inputs(record_files(directory, names, prep.annotators))
    run = _start("preprocess", args, cfg, inputs, {})
    if run is None:
        return 0
    seg = preprocess_directory(directory, prep, names)
    seg.manifest["db"] = args.db
    save_segments(run.out / "segments.npz", seg)
    run.add("segments.npz")
    run.finish({"records": names, "n_records": len(names), "n_segments": len(seg)})
    print(f"records={len(names)} segments={len(seg)}")
    return 0


def cmd_split(args, cfg) -> int:
    cache = _path(args, cfg, "cache", "cache", "segment cache")
    s = cfg["split"]
    if s["mode"] not in SPLIT_MODES:
        raise ConfigError(f"[split] mode must be one of {sorted(SPLIT_MODES)}")
    run = _start("split", args, cfg, hash_inputs({"cache": cache}), {"split_seed": s["seed"]})
    if run is None:
        return 0
    segments = load_segments(cache)
    names = list(segments.manifest.get("records") or dict.fromkeys(segments.record_names))
    plan = split_records(names, s["seed"], s["mode"])
    train = segments.select_records(plan.train_records)
    plan.folds = stratified_kfold(train.labels, s["folds"], s["seed"])
    run.write_text("split.json", json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    run.finish()
    print(f"train_records={len(plan.train_records)} test_records={len(plan.test_records)} folds={len(plan.folds)}")
    return 0


def cmd_train(args, cfg) -> int:
    mc = model_config(cfg)
    tc = train_config(cfg)
    cache = _path(args, cfg, "cache", "cache", "segment cache")
    split_path = _path(args, cfg, "split", "split", "split file")
    inputs = hash_inputs({"cache": cache, "split": split_path})
    run = _start("train_cv" if args.cv else "train", args, cfg, inputs, {"train_seed": tc.seed})
    if run is None:
        return 0
    segments = load_segments(cache)
    split = _load_split(split_path)
    prep = PrepConfig.from_dict(segments.manifest.get("prep", {}))
    common = {"split_sha1": inputs["split"], "cache_sha1": inputs["cache"]}
    if args.cv:
        train = segments.select_records(split["train_records"])
        result = run_cv(train, split["folds"], tc, mc)
        for k, (model, report) in enumerate(zip(result.models, result.reports)):
            save_checkpoint(run.out / f"fold{k}.ckpt", model, _checkpoint_manifest(cfg, prep, replace(tc, seed=tc.seed + k), {**common, "fold": k}))
            run.add(f"fold{k}.ckpt")
            run.write_text(f"fold{k}_log.csv", report.to_rows())
        rep = sample_report(
            result.y_true,
            result.probs,
            meta={"kind": "cross_validation", "folds": len(result.models), "seed": tc.seed,
                  "fold_reports": [r.to_dict() for r in result.reports]},
        )
        run.write_text("cv_report.json", rep.to_json() + "\n")
        run.write_text("cv_metrics.csv", rep.metrics_csv())
        run.finish()
        print(rep.metrics_csv(), end="")
        return 0
    fit_set, val_set = _train_val(segments, split)
    model = Model.create(mc, seed=tc.seed, dtype=np.dtype(tc.dtype))
    model, report = fit(model, fit_set, val_set, tc)
    save_checkpoint(run.out / "model.ckpt", model, _checkpoint_manifest(cfg, prep, tc, common))
    run.add("model.ckpt")
    run.write_text("train_log.csv", report.to_rows())
    run.write_text("train_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    run.finish()
    print(f"best_epoch={report.best_epoch} best_val_loss={report.best_val_loss:.6f}")
    return 0


def cmd_search(args, cfg) -> int:
    mc = model_config(cfg)
    s = cfg["search"]
    base = train_config(cfg, max_epochs=s["max_epochs"])
    if s["trials"] < 1:
        raise ConfigError("[search] trials must be ≥ 1")
    cache = _path(args, cfg, "cache", "cache", "segment cache")
    split_path = _path(args, cfg, "split", "split", "split file")
    inputs = hash_inputs({"cache": cache, "split": split_path})
    run = _start("search", args, cfg, inputs, {"search_seed": s["seed"], "train_seed": base.seed})
    if run is None:
        return 0
    fit_set, val_set = _train_val(load_segments(cache), _load_split(split_path))
    best, trials = random_search(fit_set, val_set, SearchSpace(), s["trials"], s["seed"], base, mc)
    rows = ["trial,alpha,beta1,beta2,epsilon,best_val_loss,stopping_epoch,error"]
    for t in trials:
        c = t.config
        rows.append(f"{t.index},{c.alpha:.10g},{c.beta1:.10g},{c.beta2:.10g},{c.epsilon:.10g},"
                    f"{t.best_val_loss:.8f},{t.stopping_epoch},{t.error or ''}")
    run.write_text("search_trials.csv", "\n".join(rows) + "\n")
    run.write_text("search.json", json.dumps({"best": best.to_dict()}, indent=2, sort_keys=True) + "\n")
    run.finish()
    print(f"alpha={best.alpha:.6g} beta1={best.beta1:.6g} beta2={best.beta2:.6g} epsilon={best.epsilon:.6g}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    ckpt = _path(args, cfg, "checkpoint", "checkpoint", "checkpoint")
    tol = cfg["eval"]["tolerance"]
    if not tol > 0:
        raise ConfigError("[eval] tolerance must be > 0")
    if args.task == "samples":
        cache = _path(args, cfg, "cache", "cache", "segment cache")
        split_path = _path(args, cfg, "split", "split", "split file")
        inputs = hash_inputs({"checkpoint": ckpt, "cache": cache, "split": split_path})
    else:
        directory = _dataset_dir(args, cfg, args.db)
        names = _records_arg(args)
        if names is None and getattr(args, "split", None):
            names = _load_split(Path(args.split))["test_records"]
        names = names or check_layout(directory, args.db)
        exts = ("atr",) if args.task == "qrs" else tuple(cfg["prep"]["annotators"].split(","))
        inputs = hash_inputs({"checkpoint": ckpt, **record_files(directory, names, exts)})
    run = _start(f"evaluate_{args.task}", args, cfg, inputs, {})
    if run is None:
        return 0
    model, meta = load_checkpoint(ckpt)
    prep = _prep_from_checkpoint(meta, prep_config(cfg))
    report_meta = {"task": args.task, "checkpoint_sha1": inputs["checkpoint"], "tolerance_s": tol, "seed": meta.get("seed")}

    if args.task == "samples":
        segments = load_segments(cache)
        test = segments.select_records(_load_split(split_path)["test_records"])
        if len(test) == 0:
            raise ConfigError("split has no test segments in this cache")
        probs = model.predict_proba(np.asarray(test.samples, dtype=model.params["dense.w"].dtype))
        rep = sample_report(test.labels.reshape(-1), probs, meta={**report_meta, "n_segments": len(test)})
        run.write_text("report.json", rep.to_json() + "\n")
        run.write_text("metrics.csv", rep.metrics_csv())
        run.write_text("confusion.csv", rep.confusion_csv())
        run.write_text("roc.csv", rep.roc_csv())
        print(rep.metrics_csv(), end="")
    elif args.task == "qrs":
        rows = {}
        for rec in load_records(directory, names, ("atr",), args.db):
            rows[rec.name] = evaluate_qrs_record(model, rec, prep, tol)
            log.info("record=%s tp=%d fp=%d fn=%d", rec.name, rows[rec.name].tp, rows[rec.name].fp, rows[rec.name].fn)
        rows["total"] = sum(rows.values(), start=BeatMatchResult(0, 0, 0, 0, tol))
        table = beat_table(rows)
        run.write_text("beat_table.csv", table)
        run.write_text("qrs_report.json", json.dumps(
            {"meta": {**report_meta, "db": args.db}, "beat_match": {k: v.to_dict() for k, v in rows.items()}},
            indent=2, sort_keys=True) + "\n")
        print(table, end="")
    else:
        total = None
        for rec in load_records(directory, names, prep.annotators, args.db):
            res = evaluate_boundaries_record(model, rec, prep, tol)
            total = res if total is None else {k: total[k] + res[k] for k in res}
        table = boundary_table(total)
        run.write_text("boundary_table.csv", table)
        run.write_text("boundaries_report.json", json.dumps(
            {"meta": {**report_meta, "db": args.db, "records": names},
             "boundaries": {k: v.to_dict() for k, v in total.items()}},
            indent=2, sort_keys=True) + "\n")
        print(table, end="")
    run.finish()
    return 0


def cmd_delineate(args, cfg) -> int:
    ckpt = _path(args, cfg, "checkpoint", "checkpoint", "checkpoint")
    directory = _dataset_dir(args, cfg, args.db)
    names = _records_arg(args) or check_layout(directory, args.db)
    inputs = hash_inputs({"checkpoint": ckpt, **record_files(directory, names, ())})
    run = _start("delineate", args, cfg, inputs, {})
    if run is None:
        return 0
    model, meta = load_checkpoint(ckpt)
    prep = _prep_from_checkpoint(meta, prep_config(cfg))
    for rec in load_records(directory, names, (), args.db):
        result = delineate(model, rec, prep)
        if args.format == "json":
            run.write_text(f"{rec.name}.waves.json", result.to_json() + "\n")
        else:
            run.write_text(f"{rec.name}.waves.csv", result.to_csv(DELIMITERS[args.delimiter]))
        log.info("record=%s waves=%d", rec.name, len(result.waves))
    run.finish()
    return 0


def cmd_export(args, cfg) -> int:
    report_path = Path(args.report)
    if not report_path.exists():
        raise DatasetLayoutError(f"report {report_path} does not exist")
    run = _start(f"export_{report_path.stem}", args, cfg, hash_inputs({"report": report_path}), {})
    if run is None:
        return 0
    data = json.loads(report_path.read_text())
    delim = DELIMITERS[args.delimiter]
    ext = {"comma": "csv", "tab": "tsv", "semicolon": "txt"}[args.delimiter]
    stem = report_path.stem
    if "confusion_matrix" in data:
        rep = EvalReport.from_dict(data)
        run.write_text(f"{stem}.metrics.{ext}", rep.metrics_csv(delim))
        run.write_text(f"{stem}.confusion.{ext}", rep.confusion_csv(delim))
        if rep.roc is not None:
            run.write_text(f"{stem}.roc.{ext}", rep.roc_csv(delim))
    elif "beat_match" in data or "boundaries" in data:
        rep = EvalReport.from_dict({
            "confusion_matrix": {"counts": np.zeros((4, 4), dtype=int).tolist()},
            "per_class": [], "accuracy": None,
            "averaged": dict.fromkeys(
                ["micro_precision", "micro_sensitivity", "macro_precision", "macro_sensitivity", "macro_f1",
                 "n_precision_classes", "n_sensitivity_classes"]),
            **data,
        })
        if rep.beat_match:
            run.write_text(f"{stem}.beats.{ext}", beat_table(rep.beat_match, delim))
        if rep.boundaries:
            run.write_text(f"{stem}.boundaries.{ext}", boundary_table(rep.boundaries, delim))
    else:
        raise ConfigError(f"{report_path}: not a report produced by 'evaluate' or 'train --cv'")
    run.finish()
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "delineate": cmd_delineate,
    "export": cmd_export,
}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style file with [paths] [prep] [split] [model] [train] [search] [eval]")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config setting (repeatable)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives bitwise reproducible runs")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="ecgseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ecgseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p, default_db):
        p.add_argument("--db", default=default_db, choices=["qtdb", "mitdb"])
        p.add_argument("--in", dest="input", help=f"dataset directory (default ${DATA_ROOT_ENV}/<db>)")
        p.add_argument("--records", help="comma-separated record names (default: all)")

    p = sub.add_parser("preprocess", parents=[common], help="ingest, filter, label and segment records into a cache")
    data_flags(p, "qtdb")
    p.add_argument("--channel", type=int)
    p.add_argument("--annotators", help="boundary annotation preference, e.g. q1c,pu0")
    p.add_argument("--normalize", action="store_const", const=True, help="z-score each segment")

    p = sub.add_parser("split", parents=[common], help="record-disjoint train/test split and k folds")
    p.add_argument("--cache")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=sorted(SPLIT_MODES))
    p.add_argument("--folds", type=int)

    for name, helptext in (("train", "train one model, or k fold models with --cv"),
                           ("search", "random hyperparameter search")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--cache")
        p.add_argument("--split")
        p.add_argument("--seed", type=int)
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--batch-size", type=int)
        if name == "train":
            p.add_argument("--cv", action="store_true", help="cross-validate over the split's folds")
            p.add_argument("--alpha", type=float)
        else:
            p.add_argument("--trials", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--task", choices=["samples", "qrs", "boundaries"], default="samples")
    p.add_argument("--cache")
    p.add_argument("--split")
    p.add_argument("--tolerance", type=float, help="matching window in seconds")
    data_flags(p, "qtdb")

    p = sub.add_parser("delineate", parents=[common], help="write wave onset/peak/offset tables per record")
    p.add_argument("--checkpoint")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--delimiter", choices=sorted(DELIMITERS), default="comma")
    data_flags(p, "qtdb")

    p = sub.add_parser("export", parents=[common], help="convert a JSON report to delimiter-separated tables")
    p.add_argument("--report", required=True)
    p.add_argument("--delimiter", choices=sorted(DELIMITERS), default="tab")
    return parser


FLAG_KEYS = {
    "channel": "prep.channel",
    "annotators": "prep.annotators",
    "normalize": "prep.normalize",
    "mode": "split.mode",
    "folds": "split.folds",
    "max_epochs": "train.max_epochs",
    "batch_size": "train.batch_size",
    "alpha": "train.alpha",
    "trials": "search.trials",
    "tolerance": "eval.tolerance",
}


def _overrides(args) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    for attr, key in FLAG_KEYS.items():
        if getattr(args, attr, None) is not None:
            out[key] = getattr(args, attr)
    seed = getattr(args, "seed", None)
    if seed is not None:
        section = {"split": "split", "search": "search"}.get(args.command, "train")
        out[f"{section}.seed"] = seed
    if args.command == "search" and getattr(args, "max_epochs", None) is not None:
        out.pop("train.max_epochs")
        out["search.max_epochs"] = args.max_epochs
    return out


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        return f"level={record.levelname.lower()} logger={record.name} {record.getMessage()}"


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("ecgseg")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    if args.threads < 1:
        parser.error("--threads must be ≥ 1")
    try:
        cfg = load_config(args.config, _overrides(args))
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("error=config message=%s", json.dumps(str(exc)))
        print(f"ecgseg: configuration error: {exc}", file=sys.stderr)
        return 2
    except DatasetLayoutError as exc:
        print(f"ecgseg: missing data: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"ecgseg: training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
