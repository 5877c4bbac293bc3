"""Ranking and classification scores, retention and compression arithmetic."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .featstore import LabelSet

__all__ = [
    "CompressionFigure",
    "ScoreReport",
    "accuracy",
    "average_precision",
    "compression_figure",
    "compression_rate",
    "mean_average_precision",
    "stressed_bits",
]

AP_VARIANTS = ("all_points", "eleven_point")
FLOAT_BITS = 32


@dataclass
class ScoreReport:
    metric_kind: str
    overall: float
    per_class: list[float]
    n_test: int
    excluded_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _ranking(scores) -> np.ndarray:
    # Descending score; equal scores keep their original row order.
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, positives, variant: str = "all_points") -> float:
    """Average precision of ``scores`` ranked high to low.

    ``all_points`` averages the precision at the rank of every positive.
    ``eleven_point`` averages, over recall levels 0, 0.1, ..., 1, the best
    precision reached at or beyond that recall.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if scores.shape != pos.shape or scores.ndim != 1:
        raise ValueError("average_precision: scores and positives must be 1-D and equally long")
    if not np.all(np.isfinite(scores)):
        raise ValueError("average_precision: non-finite score")
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("average_precision: undefined without positive rows")

    hits = pos[_ranking(scores)]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    if variant == "all_points":
        return math.fsum(precision[hits]) / n_pos
    if variant == "eleven_point":
        recall = tp / n_pos
        # best precision at or beyond each cutoff
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        total = 0.0
        for level in (i / 10 for i in range(11)):
            reached = np.flatnonzero(recall >= level)
            total += envelope[reached[0]] if reached.size else 0.0
        return total / 11.0
    raise ValueError(f"unknown AP variant {variant!r}")


def mean_average_precision(decisions, labels: LabelSet, variant: str = "all_points", strict: bool = False) -> ScoreReport:
    """Uniform mean of per-class AP over the rows of ``decisions``.

    Classes with no positive row are skipped and listed in
    ``excluded_classes``; with ``strict=True`` they raise instead. Their
    ``per_class`` entry is NaN.
    """
    D = np.asarray(decisions, dtype=np.float64)
    if D.ndim != 2 or D.shape != (len(labels), labels.classes):
        raise ValueError(f"mean_average_precision: decisions shape {D.shape} does not match labels")
    Y = labels.indicator()
    per_class, excluded = [], []
    for k in range(labels.classes):
        if not Y[:, k].any():
            if strict:
                raise ValueError(f"mean_average_precision: class {k} has no positive test rows")
            excluded.append(k)
            per_class.append(float("nan"))
            continue
        per_class.append(average_precision(D[:, k], Y[:, k], variant))
    kept = [v for v in per_class if not math.isnan(v)]
    if not kept:
        raise ValueError("mean_average_precision: no class has positive rows")
    return ScoreReport("map", math.fsum(kept) / len(kept), per_class, D.shape[0], excluded)


def accuracy(predictions, labels: LabelSet) -> ScoreReport:
    """Fraction of rows predicted correctly; ``per_class`` holds per-class recall."""
    if labels.kind != "single_label":
        raise ValueError("accuracy: needs single_label labels")
    pred = np.asarray(predictions)
    truth = labels.class_ids()
    if pred.shape != truth.shape:
        raise ValueError(f"accuracy: {pred.shape[0]} predictions for {truth.shape[0]} rows")
    hit = pred == truth
    per_class = [float(hit[truth == k].mean()) if (truth == k).any() else float("nan") for k in range(labels.classes)]
    return ScoreReport("accuracy", float(hit.mean()), per_class, int(truth.size))


# ---------------------------------------------------------------------------
# Compression
# ---------------------------------------------------------------------------


def stressed_bits(p: int, h: int | None) -> int:
    """Bits per stored vector: ``p * ceil(log2 h)``, or 32 bits per value when unquantized.

    A one-level dictionary costs zero bits (the constant lives in the
    dictionary, which is not counted).
    """
    if h is None:
        return FLOAT_BITS * p
    if h < 1:
        raise ValueError("stressed_bits: h must be >= 1")
    return p * (int(h) - 1).bit_length()


def compression_rate(n: int, p: int, h: int | None) -> float:
    return 1.0 - stressed_bits(p, h) / (FLOAT_BITS * n)


@dataclass
class CompressionFigure:
    original_bits: int
    stressed_bits: int
    rate: float
    retention: float

    def to_dict(self) -> dict:
        return asdict(self)


def compression_figure(n: int, p: int, h: int | None, stressed_score: float, vanilla_score: float) -> CompressionFigure:
    if not 1 <= p <= n:
        raise ValueError(f"compression_figure: p={p} outside [1, {n}]")
    if not vanilla_score > 0:
        raise ValueError("compression_figure: vanilla score must be positive")
    bits = stressed_bits(p, h)
    return CompressionFigure(
        original_bits=FLOAT_BITS * n,
        stressed_bits=bits,
        rate=1.0 - bits / (FLOAT_BITS * n),
        retention=stressed_score / vanilla_score,
    )
