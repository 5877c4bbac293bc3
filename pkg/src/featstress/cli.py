"""``featstress`` command line.

Subcommands: synth, fit, apply, train, eval, sweep, report.

Every flag can also come from a JSON file given with ``--config``; keys
are the flag names with dashes turned into underscores, and flags given
on the command line win. Each run writes its fully resolved configuration
next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import OneVsRestLinearSVC, load_classifier, save_classifier
from .featstore import (
    FeatureMatrix,
    generate_synthetic,
    load_features,
    load_labels,
    load_split,
    save_features,
    save_labels,
    save_split,
)
from .metrics import AP_VARIANTS, accuracy, compression_figure, mean_average_precision
from .numerics import l2_normalize
from .runner import KINDS, SweepPlan, aggregate, export, read_jsonl, run_sweep
from .stressors import load_model, make_stressor, save_model

THREADS_ENV = "FEATSTRESS_THREADS"

DEFAULTS = {
    "synth": {
        "classes": 4,
        "per_class": 150,
        "dims": 256,
        "informative": 32,
        "noise": 0.3,
        "scale_spread": 100.0,
        "seed": 42,
        "label_kind": "single_label",
    },
    "fit": {"p": None, "keep": None, "h": None, "seed": 0, "dr2_mode": "project", "allow_large_h": False},
    "apply": {},
    "train": {"model": None, "c": 1.0, "seed": 0},
    "eval": {"model": None, "metric": "auto", "ap_variant": "both"},
    "sweep": {
        "stressor": "dr1",
        "schedule": "paper",
        "keep": None,
        "h": "1..30",
        "reps": None,
        "seed": 0,
        "c": 1.0,
        "threads": None,
        "ap_variant": "auto",
        "metric": "auto",
        "dr2_mode": "project",
        "strict": False,
        "no_timing": False,
    },
    "report": {},
}


class UsageError(Exception):
    pass


def parse_int_list(text: str) -> list[int]:
    """``"1..30"``, ``"2,3,4"`` or a mix such as ``"1..4,8,16"``."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise UsageError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise UsageError(f"empty list {text!r}")
    return out


def parse_float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    if cfg["classes"] < 2:
        raise UsageError("--classes must be at least 2")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        features, labels, split = generate_synthetic(
            classes=cfg["classes"],
            per_class=cfg["per_class"],
            dims=cfg["dims"],
            informative_dims=cfg["informative"],
            noise_scale=cfg["noise"],
            scale_spread=cfg["scale_spread"],
            seed=cfg["seed"],
            label_kind=cfg["label_kind"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_features(features, out / "features.fmat")
    save_labels(labels, out / "labels.csv")
    save_split(split, out / "split.txt")
    _echo_config(cfg, out / "config.json")
    print(f"wrote {features.rows}x{features.dims} features, {labels.classes} classes to {out}")
    return 0


def _width(cfg: dict, n: int) -> int | None:
    if cfg.get("p") is not None:
        return int(cfg["p"])
    if cfg.get("keep") is not None:
        return max(1, int(np.floor(n * float(cfg["keep"]))))
    return None


def cmd_fit(cfg: dict) -> int:
    features = load_features(cfg["features"])
    split = load_split(cfg["split"])
    split.check_rows(features.rows)
    kind = cfg["stressor"]
    p = _width(cfg, features.dims)
    if kind in ("dr1", "dr2", "fc") and p is None:
        raise UsageError(f"--stressor {kind} needs --p or --keep")
    if kind in ("q1", "q2", "fc") and cfg.get("h") is None:
        raise UsageError(f"--stressor {kind} needs --h")
    extra = {}
    if kind in ("q1", "q2", "fc"):
        extra["allow_large_h"] = cfg["allow_large_h"]
    if kind == "dr2":
        extra["mode"] = cfg["dr2_mode"]
    h = None if cfg.get("h") is None else int(cfg["h"])
    model = make_stressor(kind, p=p, h=h, seed=cfg["seed"], **extra)
    model.fit(features.values[list(split.train_indices)])
    save_model(model, _prepare_out(cfg["out"]))
    _echo_config(cfg, _sidecar(cfg["out"]))
    print(f"fitted {kind} on {len(split.train_indices)} training rows -> {cfg['out']}")
    return 0


def cmd_apply(cfg: dict) -> int:
    model = load_model(cfg["model"])
    features = load_features(cfg["features"])
    out = model.transform(features.values)
    save_features(FeatureMatrix(out.astype(np.float32), f"{features.source_tag}|{model.kind}"), _prepare_out(cfg["out"]))
    _echo_config(cfg, _sidecar(cfg["out"]))
    print(f"applied {model.kind}: {features.dims} -> {out.shape[1]} dims -> {cfg['out']}")
    return 0


def _pipeline_rows(cfg: dict):
    features = load_features(cfg["features"])
    labels = load_labels(cfg["labels"])
    split = load_split(cfg["split"])
    split.check_rows(features.rows)
    X = features.values.astype(np.float64)
    if cfg.get("model"):
        X = load_model(cfg["model"]).transform(X)
    return l2_normalize(X), labels, split


def cmd_train(cfg: dict) -> int:
    X, labels, split = _pipeline_rows(cfg)
    idx = list(split.train_indices)
    clf = OneVsRestLinearSVC(C=cfg["c"], random_state=cfg["seed"]).fit(X[idx], labels.indicator()[idx])
    save_classifier(clf, _prepare_out(cfg["out"]))
    _echo_config(cfg, _sidecar(cfg["out"]))
    print(f"trained {len(clf.classes_)} classes, epochs {clf.n_iter_.tolist()} -> {cfg['out']}")
    return 0


def cmd_eval(cfg: dict) -> int:
    X, labels, split = _pipeline_rows(cfg)
    clf = load_classifier(cfg["classifier"])
    idx = list(split.test_indices)
    test_labels = labels.take(idx)
    metric = cfg["metric"]
    if metric == "auto":
        metric = "map" if labels.kind == "multi_label" else "accuracy"
    reports = {}
    if metric == "map":
        variants = AP_VARIANTS if cfg["ap_variant"] == "both" else (cfg["ap_variant"],)
        decisions = clf.decision_function(X[idx])
        for v in variants:
            reports[f"map_{v}"] = mean_average_precision(decisions, test_labels.as_multi_label(), v).to_dict()
    else:
        reports["accuracy"] = accuracy(clf.predict(X[idx]), test_labels).to_dict()
    text = json.dumps(reports, indent=1, allow_nan=True)
    if cfg.get("out"):
        _prepare_out(cfg["out"]).write_text(text + "\n")
        _echo_config(cfg, _sidecar(cfg["out"]))
    for name, rep in reports.items():
        print(f"{name}: {rep['overall']:.6f} over {rep['n_test']} test rows")
    return 0


def cmd_sweep(cfg: dict) -> int:
    kinds = tuple(k.strip() for k in str(cfg["stressor"]).split(",") if k.strip())
    unknown = [k for k in kinds if k not in KINDS]
    if unknown:
        raise UsageError(f"unknown stressor {unknown[0]!r}; choose from {', '.join(KINDS)}")
    keep = tuple(parse_float_list(cfg["keep"])) if cfg.get("keep") else ()
    schedule = cfg["schedule"]
    if keep and schedule == "paper":
        schedule = "fractions"
    try:
        plan = SweepPlan(
            kinds=kinds,
            schedule=schedule,
            keep_fractions=keep,
            h_values=tuple(parse_int_list(cfg["h"])),
            repetitions=cfg["reps"],
            ap_variant=cfg["ap_variant"],
            master_seed=cfg["seed"],
            c_param=cfg["c"],
            metric=cfg["metric"],
            dr2_mode=cfg["dr2_mode"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    features = load_features(cfg["features"])
    labels = load_labels(cfg["labels"])
    split = load_split(cfg["split"])
    threads = _threads(cfg["threads"])
    results = run_sweep(plan, features, labels, split, threads=threads)

    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    timing = not cfg["no_timing"]
    export(results, out / "results.jsonl", "jsonl", timing=timing)
    export(results, out / "results.csv", "csv", timing=timing)
    (out / "aggregate.json").write_text(json.dumps(aggregate(results), indent=1) + "\n")
    _echo_config({**cfg, "plan": plan.to_dict()}, out / "config.json")

    failed = [r for r in results if r.failed]
    base = results[0]
    print(f"{len(results)} results ({len(failed)} failed), vanilla score {base.stressed_score}")
    for r in failed:
        print(f"failed {r.kind} p={r.p} h={r.h} rep={r.rep}: {r.error}", file=sys.stderr)
    return 1 if failed and cfg["strict"] else 0


REPORT_COLUMNS = {
    "dr1": ("p", "p_percent", "mean_retention", "std"),
    "dr2": ("p", "p_percent", "mean_retention", "std"),
    "q1": ("h", "mean_retention", "std", "rate"),
    "q2": ("h", "mean_retention", "std", "rate"),
    "fc": ("p", "p_percent", "h", "mean_retention", "std", "rate"),
}


def report_tables(results) -> dict[str, list[dict]]:
    """Plot-ready rows per stressor kind (retention with std, plus rate for quantized kinds)."""
    results = list(results)
    tables: dict[str, list[dict]] = {}
    if not results:
        return tables
    base = next((r for r in results if r.kind == "identity"), None)
    n = base.p if base else max(r.p for r in results)
    vanilla = base.stressed_score if base else None
    for row in aggregate(results):
        kind = row["kind"]
        if kind == "identity" or row["mean_retention"] is None:
            continue
        rec = {
            "p": row["p"],
            "p_percent": 100.0 * row["p"] / n,
            "h": row["h"],
            "mean_retention": row["mean_retention"],
            "std": row["std_retention"],
            "rate": row["rate"],
        }
        if vanilla:
            rec["rate"] = compression_figure(n, row["p"], row["h"], row["mean_score"], vanilla).rate
        tables.setdefault(kind, []).append({c: rec[c] for c in REPORT_COLUMNS[kind]})
    return tables


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_report(cfg: dict) -> int:
    path = Path(cfg["results"])
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such results file")
    results = read_jsonl(path)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    tables = report_tables(results)
    if not results:
        print(f"warning: {path} holds no results; writing header-only tables", file=sys.stderr)
    kinds = list(tables) if tables else list(REPORT_COLUMNS)
    for kind in kinds:
        cols = REPORT_COLUMNS[kind]
        lines = [",".join(cols)]
        for rec in tables.get(kind, []):
            lines.append(",".join(_csv_cell(rec[c]) if c != "rate" else f"{rec[c]:.4f}" for c in cols))
        (out / f"{kind}.csv").write_text("\n".join(lines) + "\n")
    _echo_config(cfg, out / "config.json")
    print(f"wrote {', '.join(f'{k}.csv' for k in kinds)} to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser and config resolution
# ---------------------------------------------------------------------------


def _prepare_out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _sidecar(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".config.json")


def _echo_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = {k: v for k, v in cfg.items() if k not in ("func", "config")}
    path.write_text(json.dumps(clean, indent=1, sort_keys=True, default=str) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featstress",
        description="Stress dense feature vectors (dimension drop, quantization) and score them with a linear SVM.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, func):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON file of flag values (keys use underscores); command-line flags win")
        p.set_defaults(func=func)
        return p

    def d(cmd, key):
        return f" (default: {DEFAULTS[cmd][key]})"

    p = add("synth", "generate a synthetic dataset (features.fmat, labels.csv, split.txt)", cmd_synth)
    p.add_argument("--out-dir", help="directory for the generated files (required)")
    p.add_argument("--classes", type=int, help="number of classes, >= 2" + d("synth", "classes"))
    p.add_argument("--per-class", type=int, help="rows per class" + d("synth", "per_class"))
    p.add_argument("--dims", type=int, help="feature dimensionality" + d("synth", "dims"))
    p.add_argument("--informative", type=int, help="dimensions carrying class information" + d("synth", "informative"))
    p.add_argument("--noise", type=float, help="std of the isotropic Gaussian noise" + d("synth", "noise"))
    p.add_argument("--scale-spread", type=float, help="per-dimension scales drawn log-uniformly in [1, this]" + d("synth", "scale_spread"))
    p.add_argument("--seed", type=int, help="random seed" + d("synth", "seed"))
    p.add_argument("--label-kind", choices=("single_label", "multi_label"), help="label file kind" + d("synth", "label_kind"))

    p = add("fit", "fit a stressor on the training rows and save it as JSON", cmd_fit)
    p.add_argument("--features", help="FMAT feature file (required)")
    p.add_argument("--split", help="split file (required)")
    p.add_argument("--stressor", choices=KINDS, help="stressor kind (required)")
    p.add_argument("--p", type=int, help="number of dimensions kept (dr1, dr2, fc)")
    p.add_argument("--keep", type=float, help="fraction of dimensions kept, alternative to --p")
    p.add_argument("--h", type=int, help="quantization levels (q1, q2, fc)")
    p.add_argument("--seed", type=int, help="seed for dr1" + d("fit", "seed"))
    p.add_argument("--dr2-mode", choices=("project", "variance"), help="dr2 reduction mode" + d("fit", "dr2_mode"))
    p.add_argument("--allow-large-h", action="store_true", default=None, help="permit h above 30")
    p.add_argument("--out", help="model JSON path (required)")

    p = add("apply", "apply a fitted stressor to a feature file", cmd_apply)
    p.add_argument("--model", help="stressor model JSON (required)")
    p.add_argument("--features", help="FMAT feature file (required)")
    p.add_argument("--out", help="output FMAT path (required)")

    for name, help_, func in (
        ("train", "train the one-vs-rest SVM on (optionally stressed) l2-normalized training rows", cmd_train),
        ("eval", "score a trained SVM on the test rows", cmd_eval),
    ):
        p = add(name, help_, func)
        p.add_argument("--features", help="FMAT feature file (required)")
        p.add_argument("--labels", help="labels CSV (required)")
        p.add_argument("--split", help="split file (required)")
        p.add_argument("--model", help="stressor model applied before normalization")
        if name == "train":
            p.add_argument("--c", type=float, help="SVM penalty C" + d("train", "c"))
            p.add_argument("--seed", type=int, help="coordinate-order seed" + d("train", "seed"))
            p.add_argument("--out", help="classifier JSON path (required)")
        else:
            p.add_argument("--classifier", help="classifier JSON (required)")
            p.add_argument("--metric", choices=("auto", "map", "accuracy"), help="score kind" + d("eval", "metric"))
            p.add_argument("--ap-variant", choices=(*AP_VARIANTS, "both"), help="AP variant for mAP" + d("eval", "ap_variant"))
            p.add_argument("--out", help="optional JSON path for the score report")

    p = add("sweep", "run a stress sweep and write results.jsonl / results.csv", cmd_sweep)
    p.add_argument("--features", help="FMAT feature file (required)")
    p.add_argument("--labels", help="labels CSV (required)")
    p.add_argument("--split", help="split file (required)")
    p.add_argument("--stressor", help=f"comma-separated kinds from {', '.join(KINDS)}" + d("sweep", "stressor"))
    p.add_argument("--schedule", choices=("paper", "fractions"), help="dimension grid" + d("sweep", "schedule"))
    p.add_argument("--keep", help="comma-separated keep fractions; implies --schedule fractions")
    p.add_argument("--h", help="quantization levels, e.g. 1..30 or 2,3,4" + d("sweep", "h"))
    p.add_argument("--reps", type=int, help="repetitions of dr1 cells (default: 10)")
    p.add_argument("--seed", type=int, help="master seed" + d("sweep", "seed"))
    p.add_argument("--c", type=float, help="SVM penalty C" + d("sweep", "c"))
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or CPU count)")
    p.add_argument(
        "--ap-variant",
        choices=("auto", *AP_VARIANTS),
        help="AP variant for mAP; auto = eleven_point for voc2007-tagged features" + d("sweep", "ap_variant"),
    )
    p.add_argument("--metric", choices=("auto", "map", "accuracy"), help="score kind" + d("sweep", "metric"))
    p.add_argument("--dr2-mode", choices=("project", "variance"), help="dr2 reduction mode" + d("sweep", "dr2_mode"))
    p.add_argument("--strict", action="store_true", default=None, help="exit 1 if any cell failed")
    p.add_argument("--no-timing", action="store_true", default=None, help="write ms as 0 for byte-reproducible output")
    p.add_argument("--out-dir", help="output directory (required)")

    p = add("report", "turn results.jsonl into plot-ready CSV tables", cmd_report)
    p.add_argument("--results", help="results.jsonl from a sweep (required)")
    p.add_argument("--out-dir", help="output directory (required)")
    return parser


REQUIRED = {
    "synth": ("out_dir",),
    "fit": ("features", "split", "stressor", "out"),
    "apply": ("model", "features", "out"),
    "train": ("features", "labels", "split", "out"),
    "eval": ("features", "labels", "split", "classifier"),
    "sweep": ("features", "labels", "split", "out_dir"),
    "report": ("results", "out_dir"),
}


def resolve_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    cmd = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "command", "config")}
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"--config: {exc}")
        unknown = sorted(set(file_cfg) - set(flags))
        if unknown:
            parser.error(f"--config: unknown keys {unknown}")
    cfg = {**DEFAULTS[cmd], **file_cfg, **{k: v for k, v in flags.items() if v is not None}}
    for key in flags:
        cfg.setdefault(key, None)
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) is None]
    if missing:
        parser.error(f"{cmd}: missing required " + ", ".join("--" + m.replace("_", "-") for m in missing))
    cfg["command"] = cmd
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = resolve_config(args, parser)
    try:
        return args.func(cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"featstress {cfg['command']}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
