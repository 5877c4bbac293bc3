"""Experiment sweeps: stress -> l2-normalize -> train SVM -> score, over a grid.

A sweep always starts with the identity cell; its score is the vanilla
reference every other cell's retention is measured against. Each cell
gets its own seed ``derive_seed(master_seed, kind, p, h, rep)``, so cells
can run in any order on any number of threads with identical output.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import groupby

import numpy as np

from .classifier import OneVsRestLinearSVC
from .featstore import DatasetSplit, LabelSet, _atomic_write
from .metrics import accuracy, compression_rate, mean_average_precision
from .numerics import derive_seed, fit_eigenbasis, l2_normalize
from .stressors import (
    FeatureCompressor,
    GlobalQuantizer,
    IdentityStressor,
    PCADimensionDrop,
    PerDimensionQuantizer,
    RandomDimensionDrop,
    schedule,
)

__all__ = ["SweepPlan", "SweepResult", "aggregate", "export", "read_jsonl", "run_sweep"]

KINDS = ("identity", "dr1", "dr2", "q1", "q2", "fc")
CSV_COLUMNS = ("kind", "p", "h", "rep", "seed", "vanilla", "score", "retention", "rate", "ms")
DEFAULT_H = tuple(range(1, 31))


@dataclass(frozen=True)
class SweepPlan:
    """What to sweep.

    ``schedule="paper"`` uses the twenty widths of ``schedule(n)``;
    ``schedule="fractions"`` uses ``floor(n * f)`` for each keep fraction.
    ``repetitions=None`` means 10 for dr1 and 1 for deterministic kinds.
    ``ap_variant="auto"`` picks eleven_point for features whose source tag
    mentions voc2007 and all_points otherwise.
    """

    kinds: tuple[str, ...] = ("dr1",)
    schedule: str = "paper"
    keep_fractions: tuple[float, ...] = ()
    h_values: tuple[int, ...] = DEFAULT_H
    repetitions: int | None = None
    ap_variant: str = "auto"
    master_seed: int = 0
    c_param: float = 1.0
    metric: str = "auto"
    dr2_mode: str = "project"

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise ValueError(f"SweepPlan: unknown or empty stressor kinds {bad or self.kinds}")
        if self.schedule not in ("paper", "fractions"):
            raise ValueError(f"SweepPlan: unknown schedule {self.schedule!r}")
        if self.schedule == "fractions":
            if not self.keep_fractions:
                raise ValueError("SweepPlan: keep_fractions must be non-empty")
            if any(not 0 < f <= 1 for f in self.keep_fractions):
                raise ValueError("SweepPlan: keep fractions must lie in (0, 1]")
        if any(k in self.kinds for k in ("q1", "q2", "fc")) and not self.h_values:
            raise ValueError("SweepPlan: h_values must be non-empty")
        if self.repetitions is not None and self.repetitions < 1:
            raise ValueError("SweepPlan: repetitions must be >= 1")
        if self.ap_variant not in ("auto", "all_points", "eleven_point"):
            raise ValueError(f"SweepPlan: unknown AP variant {self.ap_variant!r}")
        if self.metric not in ("auto", "map", "accuracy"):
            raise ValueError(f"SweepPlan: unknown metric {self.metric!r}")

    def widths(self, n: int) -> list[int]:
        if self.schedule == "paper":
            return list(schedule(n).steps)
        return [max(1, math.floor(n * f)) for f in self.keep_fractions]

    def reps(self, kind: str) -> int:
        if self.repetitions is not None:
            return self.repetitions if kind == "dr1" else 1
        return 10 if kind == "dr1" else 1

    def cells(self, n: int) -> list[tuple[str, int, int | None, int]]:
        """Every (kind, p, h, rep) of the sweep, identity first."""
        out = [("identity", n, None, 0)]
        for kind in self.kinds:
            if kind == "identity":
                continue
            if kind in ("dr1", "dr2"):
                out += [(kind, p, None, r) for p in self.widths(n) for r in range(self.reps(kind))]
            elif kind in ("q1", "q2"):
                out += [(kind, n, int(h), 0) for h in self.h_values]
            else:
                out += [(kind, p, int(h), 0) for p in self.widths(n) for h in self.h_values]
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepResult:
    kind: str
    p: int
    h: int | None
    rep: int
    seed: int
    vanilla_score: float | None
    stressed_score: float | None
    retention: float | None
    rate: float
    ms: float = 0.0
    per_class: list = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d["ms"] = 0.0
        d["per_class"] = [None if (v is None or math.isnan(v)) else v for v in self.per_class]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        d = dict(d)
        d["per_class"] = [float("nan") if v is None else v for v in d.get("per_class", [])]
        return cls(**d)


def resolve_ap_variant(variant: str, source_tag: str = "") -> str:
    if variant != "auto":
        return variant
    return "eleven_point" if "voc2007" in source_tag.lower().replace(" ", "") else "all_points"


def _make_model(kind, p, h, seed, plan: SweepPlan):
    if kind == "identity":
        return IdentityStressor()
    if kind == "dr1":
        return RandomDimensionDrop(n_keep=p, random_state=seed)
    if kind == "dr2":
        return PCADimensionDrop(n_components=p, mode=plan.dr2_mode)
    if kind == "q1":
        return GlobalQuantizer(h)
    if kind == "q2":
        return PerDimensionQuantizer(h)
    return FeatureCompressor(n_components=p, h=h)


class _Pipeline:
    def __init__(self, plan: SweepPlan, X, labels: LabelSet, split: DatasetSplit, source_tag: str = ""):
        split.check_rows(X.shape[0])
        if len(labels) != X.shape[0]:
            raise ValueError(f"run_sweep: {X.shape[0]} feature rows but {len(labels)} label rows")
        self.plan = plan
        self.train_idx = np.asarray(split.train_indices, dtype=np.intp)
        self.test_idx = np.asarray(split.test_indices, dtype=np.intp)
        self.X_train = X[self.train_idx]
        self.X_test = X[self.test_idx]
        self.Y_train = labels.indicator()[self.train_idx]
        self.test_labels = labels.take(self.test_idx.tolist())
        metric = plan.metric
        if metric == "auto":
            metric = "map" if labels.kind == "multi_label" else "accuracy"
        self.metric = metric
        self.ap_variant = resolve_ap_variant(plan.ap_variant, source_tag)
        self.basis = None
        self.basis_error = None

    def prepare_basis(self):
        try:
            self.basis = fit_eigenbasis(self.X_train)
        except Exception as exc:  # recorded per cell
            self.basis_error = f"{type(exc).__name__}: {exc}"

    def fit_stressor(self, kind, p, h, seed):
        model = _make_model(kind, p, h, seed, self.plan)
        needs_basis = kind == "fc" or (kind == "dr2" and self.plan.dr2_mode == "project")
        if not needs_basis:
            return model.fit(self.X_train)
        if self.basis_error:
            raise RuntimeError(self.basis_error)
        limit = self.basis.n_components
        if not 1 <= p <= limit:
            raise ValueError(f"{kind}: p={p} outside [1, {limit}] (rank of the training set)")
        if kind == "dr2":
            return PCADimensionDrop.from_basis(self.basis, p)
        return model.fit(self.X_train, basis=self.basis)

    def score(self, kind, p, h, seed) -> tuple[float, list[float]]:
        model = self.fit_stressor(kind, p, h, seed)
        Z_train = l2_normalize(model.transform(self.X_train))
        Z_test = l2_normalize(model.transform(self.X_test))
        clf = OneVsRestLinearSVC(C=self.plan.c_param, random_state=seed).fit(Z_train, self.Y_train)
        if self.metric == "map":
            report = mean_average_precision(clf.decision_function(Z_test), self.test_labels.as_multi_label(), self.ap_variant)
        else:
            report = accuracy(clf.predict(Z_test), self.test_labels)
        return report.overall, report.per_class


def run_sweep(plan: SweepPlan, features, labels: LabelSet, split: DatasetSplit, threads: int = 1) -> list[SweepResult]:
    """Evaluate every cell of ``plan``; failed cells carry an error string."""
    X = np.asarray(getattr(features, "values", features), dtype=np.float64)
    n = X.shape[1]
    pipe = _Pipeline(plan, X, labels, split, getattr(features, "source_tag", ""))
    cells = plan.cells(n)
    if any(k == "fc" or (k == "dr2" and plan.dr2_mode == "project") for k, *_ in cells):
        pipe.prepare_basis()

    def evaluate(cell, vanilla):
        kind, p, h, rep = cell
        seed = derive_seed(plan.master_seed, kind, p, h, rep)
        rate = compression_rate(n, p, h)
        t0 = time.perf_counter()
        try:
            score, per_class = pipe.score(kind, p, h, seed)
            error = None
        except Exception as exc:
            score, per_class, error = None, [], f"{type(exc).__name__}: {exc}"
        ms = (time.perf_counter() - t0) * 1e3
        if vanilla is None and kind == "identity":
            vanilla = score
        retention = None
        if score is not None and vanilla:
            retention = score / vanilla
        return SweepResult(kind, p, h, rep, seed, vanilla, score, retention, rate, ms, per_class, error)

    baseline = evaluate(cells[0], None)
    rest = cells[1:]
    if threads > 1 and len(rest) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: evaluate(c, baseline.stressed_score), rest))
    else:
        results = [evaluate(c, baseline.stressed_score) for c in rest]
    return [baseline, *results]


def _cell_key(r: SweepResult):
    return (KINDS.index(r.kind), -r.p, -1 if r.h is None else r.h)


def aggregate(results) -> list[dict]:
    """Mean and population std of score and retention per (kind, p, h) cell."""
    results = list(results)
    if not results:
        raise ValueError("aggregate: no results")
    out = []
    for key, group in groupby(sorted(results, key=_cell_key), key=_cell_key):
        group = list(group)
        ok = [r for r in group if not r.failed and r.retention is not None]
        scores = np.array([r.stressed_score for r in ok], dtype=np.float64)
        ret = np.array([r.retention for r in ok], dtype=np.float64)
        first = group[0]
        out.append(
            {
                "kind": first.kind,
                "p": first.p,
                "h": first.h,
                "count": len(ok),
                "failed": len(group) - len(ok),
                "mean_score": float(scores.mean()) if ok else None,
                "std_score": float(scores.std()) if ok else None,
                "mean_retention": float(ret.mean()) if ok else None,
                "std_retention": float(ret.std()) if ok else None,
                "rate": first.rate,
            }
        )
    return out


def _fmt(v, spec="{:.6g}"):
    return "" if v is None else spec.format(v)


def to_csv(results, timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow(
            [
                r.kind,
                r.p,
                "" if r.h is None else r.h,
                r.rep,
                r.seed,
                _fmt(r.vanilla_score),
                _fmt(r.stressed_score),
                _fmt(r.retention),
                _fmt(r.rate, "{:.4f}"),
                _fmt(r.ms if timing else 0.0, "{:.1f}"),
            ]
        )
    return buf.getvalue()


def to_jsonl(results, timing: bool = True) -> str:
    return "".join(json.dumps(r.to_dict(timing), allow_nan=False) + "\n" for r in results)


def export(results, path, format: str = "jsonl", timing: bool = True) -> None:
    """Write results as JSONL (full precision) or CSV (6 significant digits, rate to 4 decimals).

    ``timing=False`` writes ``ms`` as 0 so that reruns are byte-identical.
    """
    if format == "jsonl":
        text = to_jsonl(results, timing)
    elif format == "csv":
        text = to_csv(results, timing)
    else:
        raise ValueError(f"export: unknown format {format!r}")
    _atomic_write(path, text)


def read_jsonl(path) -> list[SweepResult]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(SweepResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed result: {exc}") from None
    return out
