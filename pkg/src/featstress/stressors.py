"""Stressing transforms for feature vectors.

Every stressor is a scikit-learn transformer: ``fit`` sees training rows
only, ``transform`` applies the frozen parameters to any rows.

=====================  ======  =============================================
class                  kind    effect
=====================  ======  =============================================
IdentityStressor       identity  pass-through (vanilla baseline)
RandomDimensionDrop    dr1     keep a uniformly random subset of columns
PCADimensionDrop       dr2     project onto the top principal axes
GlobalQuantizer        q1      one scalar dictionary shared by all columns
PerDimensionQuantizer  q2      one scalar dictionary per column
FeatureCompressor      fc      dr2 projection followed by q2 quantization
=====================  ======  =============================================

Quantizer dictionaries hold ``h`` centroids placed at the centres of ``h``
equal intervals spanning the training range; values are mapped to the
nearest centroid with ties going to the smaller one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .featstore import FeatureMatrix, _atomic_write, decode_array, encode_array
from .numerics import EigenBasis, RngStream, fit_eigenbasis, project

__all__ = [
    "DimensionSchedule",
    "FeatureCompressor",
    "GlobalQuantizer",
    "IdentityStressor",
    "PCADimensionDrop",
    "PerDimensionQuantizer",
    "RandomDimensionDrop",
    "apply",
    "fit_dr1",
    "fit_dr2",
    "fit_fc",
    "fit_identity",
    "fit_q1",
    "fit_q2",
    "load_model",
    "make_stressor",
    "save_model",
    "schedule",
]

MODEL_VERSION = 1
MAX_DEFAULT_H = 30
SCHEDULE_STEPS = 20


# ---------------------------------------------------------------------------
# Dimension schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DimensionSchedule:
    n: int
    steps: tuple[int, ...]

    def keep_percent(self) -> tuple[float, ...]:
        return tuple(100.0 * p / self.n for p in self.steps)


def schedule(n: int) -> DimensionSchedule:
    """Twenty shrinking widths ``floor(n * (21 - i) / 20)`` for ``i = 1..20``."""
    n = int(n)
    if n < SCHEDULE_STEPS:
        raise ValueError(f"schedule: n={n} < {SCHEDULE_STEPS} would reach zero dimensions")
    steps = tuple(n * (SCHEDULE_STEPS + 1 - i) // SCHEDULE_STEPS for i in range(1, SCHEDULE_STEPS + 1))
    return DimensionSchedule(n, steps)


# ---------------------------------------------------------------------------
# Base machinery
# ---------------------------------------------------------------------------


def _fingerprint(X: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(X.shape, dtype="<u8").tobytes())
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _as_stream(random_state, label: str) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, RngStream):
        return random_state.generator()
    if random_state is None:
        return np.random.default_rng()
    return RngStream(int(random_state), label).generator()


def _plain(v) -> bool:
    return v is None or isinstance(v, (bool, int, float, str))


class _Stressor(TransformerMixin, BaseEstimator):
    kind = "?"

    def _validate(self, X, reset: bool) -> np.ndarray:
        return validate_data(self, X, reset=reset, dtype=np.float64, ensure_all_finite=True)

    def _start_fit(self, X) -> np.ndarray:
        X = self._validate(X, reset=True)
        self.fit_fingerprint_ = _fingerprint(X)
        return X

    def _start_transform(self, X) -> np.ndarray:
        check_is_fitted(self)
        return self._validate(X, reset=False)

    @property
    def input_dims(self) -> int:
        check_is_fitted(self)
        return int(self.n_features_in_)

    # serialization hooks
    def _manifest_fields(self) -> dict:
        return {}

    def _restore_fields(self, d: dict) -> None:
        pass

    def to_manifest(self) -> dict:
        check_is_fitted(self)
        return {
            "version": MODEL_VERSION,
            "kind": self.kind,
            "input_dims": self.input_dims,
            "fit_fingerprint": self.fit_fingerprint_,
            "params": {k: v for k, v in self.get_params().items() if _plain(v)},
            **self._manifest_fields(),
        }


class IdentityStressor(_Stressor):
    """Vanilla transform: rows come back unchanged."""

    kind = "identity"

    def fit(self, X, y=None):
        self._start_fit(X)
        return self

    def transform(self, X):
        check_is_fitted(self)
        arr = np.asarray(X)
        self._validate(arr, reset=False)
        return arr.copy()

    def __sklearn_is_fitted__(self):
        return hasattr(self, "fit_fingerprint_")


class RandomDimensionDrop(_Stressor):
    """Keep ``n_keep`` columns chosen uniformly at random, in ascending order.

    Parameters
    ----------
    n_keep : int
        Number of columns retained.
    random_state : int, RngStream, numpy Generator or None
        Integers are expanded through ``RngStream(seed, "dr1")``.
    """

    kind = "dr1"

    def __init__(self, n_keep=1, random_state=None):
        self.n_keep = n_keep
        self.random_state = random_state

    def _fit_dims(self, n: int):
        p = int(self.n_keep)
        if not 1 <= p <= n:
            raise ValueError(f"dr1: n_keep={p} outside [1, {n}]")
        rng = _as_stream(self.random_state, "dr1")
        self.kept_dims_ = np.sort(rng.choice(n, size=p, replace=False)).astype(np.intp)
        self.n_features_in_ = n
        return self

    def fit(self, X, y=None):
        X = self._start_fit(X)
        return self._fit_dims(X.shape[1])

    def transform(self, X):
        X = self._start_transform(X)
        return X[:, self.kept_dims_]

    def _manifest_fields(self):
        return {"p": int(self.kept_dims_.size), "kept_dims": encode_array(self.kept_dims_)}

    def _restore_fields(self, d):
        self.kept_dims_ = decode_array(d["kept_dims"])[0].astype(np.intp)


class PCADimensionDrop(_Stressor):
    """Reduce to ``n_components`` dimensions using the training PCA.

    ``mode="project"`` (default) returns coordinates along the top
    principal axes. ``mode="variance"`` keeps the original columns with the
    largest training variance instead, for comparison.
    """

    kind = "dr2"

    def __init__(self, n_components=1, mode="project", eigensolver="auto"):
        self.n_components = n_components
        self.mode = mode
        self.eigensolver = eigensolver

    @classmethod
    def from_basis(cls, basis: EigenBasis, p: int, fingerprint: str = "") -> "PCADimensionDrop":
        """Build a fitted projection from an already computed basis."""
        est = cls(n_components=p)
        est._set_basis(basis, p)
        est.n_features_in_ = basis.dims
        est.fit_fingerprint_ = fingerprint
        return est

    def _set_basis(self, basis: EigenBasis, p: int):
        if not 1 <= p <= basis.n_components:
            raise ValueError(f"dr2: n_components={p} outside [1, {basis.n_components}]")
        self.basis_ = basis
        self.explained_variance_ = basis.eigenvalues[:p].copy()

    def fit(self, X, y=None):
        X = self._start_fit(X)
        p = int(self.n_components)
        if X.shape[0] < 2:
            raise ValueError("dr2: need at least 2 training rows")
        if self.mode == "project":
            limit = min(X.shape[0] - 1, X.shape[1])
            if not 1 <= p <= limit:
                raise ValueError(f"dr2: n_components={p} outside [1, {limit}]")
            self._set_basis(fit_eigenbasis(X, solver=self.eigensolver), p)
        elif self.mode == "variance":
            if not 1 <= p <= X.shape[1]:
                raise ValueError(f"dr2: n_components={p} outside [1, {X.shape[1]}]")
            var = X.var(axis=0, ddof=1)
            self.kept_dims_ = np.sort(np.argsort(-var, kind="stable")[:p]).astype(np.intp)
            self.explained_variance_ = var[self.kept_dims_]
        else:
            raise ValueError(f"dr2: unknown mode {self.mode!r}")
        return self

    def transform(self, X):
        X = self._start_transform(X)
        if self.mode == "variance":
            return X[:, self.kept_dims_]
        return project(self.basis_, X, int(self.n_components))

    def inverse_transform(self, Z):
        check_is_fitted(self)
        Z = np.asarray(Z, dtype=np.float64)
        if self.mode == "variance":
            out = np.zeros((Z.shape[0], self.n_features_in_))
            out[:, self.kept_dims_] = Z
            return out
        return Z @ self.basis_.components[: Z.shape[1]] + self.basis_.mean

    def __sklearn_is_fitted__(self):
        return hasattr(self, "explained_variance_")

    def _manifest_fields(self):
        d = {"p": int(self.n_components), "mode": self.mode}
        if self.mode == "variance":
            d["kept_dims"] = encode_array(self.kept_dims_)
            d["explained_variance"] = encode_array(self.explained_variance_)
        else:
            d["basis"] = self.basis_.to_dict()
        return d

    def _restore_fields(self, d):
        if d.get("mode", "project") == "variance":
            self.kept_dims_ = decode_array(d["kept_dims"])[0].astype(np.intp)
            self.explained_variance_ = decode_array(d["explained_variance"])[0]
        else:
            self._set_basis(EigenBasis.from_dict(d["basis"]), int(d["p"]))


# ---------------------------------------------------------------------------
# Scalar quantizers
# ---------------------------------------------------------------------------


def _check_h(h, allow_large_h: bool) -> int:
    if int(h) != h or h < 1:
        raise ValueError(f"quantizer: h must be a positive integer, got {h!r}")
    if h > MAX_DEFAULT_H and not allow_large_h:
        raise ValueError(f"quantizer: h={h} exceeds {MAX_DEFAULT_H}; pass allow_large_h=True to override")
    return int(h)


def _two_diff(a, b):
    """``a - b`` rounded, plus the exact rounding residual (Knuth's TwoSum)."""
    s = a - b
    bb = s - a
    err = (a - (s - bb)) + (-b - bb)
    return s, err


def _exact_le(a, b, bound):
    # True where the real number a - b is <= bound (a float), with no rounding slack.
    d, err = _two_diff(a, b)
    return (d < bound) | ((d == bound) & (err <= 0))


def _covers(lo, hi, first, step, levels) -> np.ndarray:
    """Whether the centroid grid keeps every value of [lo, hi] within step/2.

    Checks the exact distances from the range ends to the outer centroids
    and the exact gaps between neighbours.
    """
    half = step / 2.0
    last = centroids_at(first, step, levels - 1)
    ok = _exact_le(first, lo, half) & _exact_le(hi, last, half)
    dic = _dictionaries(first, step, levels)
    gaps = _exact_le(dic[:, 1:], dic[:, :-1], step[:, None])
    valid = np.arange(1, dic.shape[1])[None, :] < levels[:, None]
    return ok & np.all(gaps | ~valid, axis=1)


def _snapped_grid(lo, hi, h: int):
    """Centroids on a uniform float grid whose step is rounded up just enough.

    All centroids and the step are multiples of the float spacing ``u`` at
    the largest magnitude in play, so every centroid is exact and the
    neighbour gaps equal the step. The step is the smallest such multiple
    with ``h * step >= hi - lo + u``, which leaves room for rounding the
    first centroid down onto the grid.
    """
    u = np.spacing(2.0 * np.maximum(np.abs(lo), np.abs(hi)))
    step = np.ceil((hi - lo + u) / h / u) * u
    for _ in range(64):
        short = ~_exact_le(hi, lo, h * step - u)
        if not short.any():
            break
        step = np.where(short, step + u, step)
    t, err = _two_diff(lo, -step / 2.0)
    first = np.floor(t / u) * u
    first = np.where((first == t) & (err < 0), first - u, first)
    return first, step


def _levels(lo, hi, h: int):
    """First centroid, interval width and dictionary size for each range.

    The plain layout ``(lo + st/2) + st * i`` with ``st = (hi - lo) / h`` is
    kept whenever its rounded centroids still leave every in-range value
    within ``st/2`` of one of them. Otherwise the range gets a snapped grid
    (see ``_snapped_grid``) whose step exceeds ``(hi - lo) / h`` by at most
    a few units in the last place.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    flat = hi == lo
    step = np.where(flat, 0.0, (hi - lo) / h)
    if not np.all(np.isfinite(step)):
        raise ValueError("quantizer: training range overflows float64")
    levels = np.where(flat, 1, h).astype(np.int64)
    first = lo + step / 2.0

    if levels.size * h <= _MATERIALIZE_LIMIT:
        bad = ~flat & ~_covers(lo, hi, first, step, levels)
    else:
        bad = ~flat
    if bad.any():
        f, s = _snapped_grid(lo[bad], hi[bad], h)
        first[bad], step[bad] = f, s
    if not np.all(np.isfinite(step)):
        raise ValueError("quantizer: training range overflows float64")
    return first, step, levels


_MATERIALIZE_LIMIT = 10_000_000


def centroids_at(first, step, idx):
    # The single definition of a dictionary entry; fit, transform and the
    # materialized dictionaries all go through it.
    return first + step * idx


def _dictionaries(first, step, levels) -> np.ndarray:
    first, step, levels = np.atleast_1d(first), np.atleast_1d(step), np.atleast_1d(levels)
    width = int(levels.max())
    idx = np.minimum(np.arange(width)[None, :], (levels - 1)[:, None])
    return centroids_at(first[:, None], step[:, None], idx)


def nearest_level(X, first, step, levels) -> np.ndarray:
    """Index of the nearest centroid for every element of ``X``.

    A closed-form guess ``ceil((x - first) / step - 1/2)`` (clamped) is
    refined by a neighbour check on the computed distances, so the result
    agrees bit-for-bit with a brute-force argmin over the dictionary,
    including the rule that exact midpoints go to the smaller centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    first = np.broadcast_to(first, X.shape)
    step = np.broadcast_to(step, X.shape)
    top = np.broadcast_to(levels - 1, X.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = np.where(step > 0, (X - first) / np.where(step > 0, step, 1.0), 0.0)
    j = np.clip(np.ceil(u - 0.5), 0, top).astype(np.int64)

    while True:
        d = np.abs(X - centroids_at(first, step, j))
        jl = np.maximum(j - 1, 0)
        jr = np.minimum(j + 1, top)
        go_left = (jl < j) & (np.abs(X - centroids_at(first, step, jl)) <= d)
        go_right = ~go_left & (jr > j) & (np.abs(X - centroids_at(first, step, jr)) < d)
        if not (go_left.any() or go_right.any()):
            return j
        j = j - go_left + go_right


class _ScalarQuantizer(_Stressor):
    def __init__(self, h=4, allow_large_h=False):
        self.h = h
        self.allow_large_h = allow_large_h

    def _fit_ranges(self, lo, hi):
        h = _check_h(self.h, self.allow_large_h)
        first, step, levels = _levels(lo, hi, h)
        if h > 1 and levels.size * h <= _MATERIALIZE_LIMIT:
            dic = _dictionaries(first, step, levels)
            cols = levels > 1
            if np.any(np.diff(dic[cols], axis=1) <= 0):
                raise ValueError("quantizer: interval width below floating-point resolution")
        if self.kind == "q1":
            first, step, levels = first[0], step[0], levels[0]
        self.first_, self.step_, self.levels_ = first, step, levels
        return self

    def codes(self, X) -> np.ndarray:
        """Dictionary index of every element."""
        X = self._start_transform(X)
        return nearest_level(X, self.first_, self.step_, self.levels_)

    def transform(self, X):
        X = self._start_transform(X)
        j = nearest_level(X, self.first_, self.step_, self.levels_)
        return centroids_at(np.broadcast_to(self.first_, X.shape), np.broadcast_to(self.step_, X.shape), j)

    @property
    def max_error(self):
        """Largest distance from an in-range value to its centroid (half a step)."""
        check_is_fitted(self)
        return self.step_ / 2.0

    def _manifest_fields(self):
        d = {
            "h": int(self.h),
            "first": encode_array(np.atleast_1d(self.first_)),
            "step": encode_array(np.atleast_1d(self.step_)),
            "levels": encode_array(np.atleast_1d(self.levels_)),
        }
        if int(np.max(self.levels_)) <= 1 << 16:
            d["dictionaries"] = encode_array(_dictionaries(self.first_, self.step_, self.levels_))
        return d

    def _restore_fields(self, d):
        first = decode_array(d["first"])[0]
        step = decode_array(d["step"])[0]
        levels = decode_array(d["levels"])[0].astype(np.int64)
        if self.kind == "q1":
            first, step, levels = first[0], step[0], levels[0]
        self.first_, self.step_, self.levels_ = first, step, levels


class GlobalQuantizer(_ScalarQuantizer):
    """One dictionary for every column, spanning the global training min/max."""

    kind = "q1"

    def fit(self, X, y=None):
        X = self._start_fit(X)
        return self._fit_ranges(X.min(), X.max())

    @property
    def dictionary_(self) -> np.ndarray:
        check_is_fitted(self)
        return _dictionaries(self.first_, self.step_, self.levels_)[0]


class PerDimensionQuantizer(_ScalarQuantizer):
    """One dictionary per column, spanning that column's training min/max."""

    kind = "q2"

    def fit(self, X, y=None):
        X = self._start_fit(X)
        return self._fit_ranges(X.min(axis=0), X.max(axis=0))

    @property
    def dictionaries_(self) -> list[np.ndarray]:
        check_is_fitted(self)
        dic = _dictionaries(self.first_, self.step_, self.levels_)
        return [row[:n] for row, n in zip(dic, self.levels_)]


class FeatureCompressor(_Stressor):
    """PCA projection to ``n_components`` followed by per-dimension quantization.

    The quantizer is fitted on the projected training rows, so its
    dictionaries live in the rotated space.
    """

    kind = "fc"

    def __init__(self, n_components=1, h=4, allow_large_h=False, eigensolver="auto"):
        self.n_components = n_components
        self.h = h
        self.allow_large_h = allow_large_h
        self.eigensolver = eigensolver

    def fit(self, X, y=None, basis: EigenBasis | None = None):
        X = self._start_fit(X)
        _check_h(self.h, self.allow_large_h)
        if basis is None:
            self.pca_ = PCADimensionDrop(self.n_components, eigensolver=self.eigensolver).fit(X)
        else:
            if basis.dims != X.shape[1]:
                raise ValueError("fc: precomputed basis does not match input width")
            self.pca_ = PCADimensionDrop.from_basis(basis, int(self.n_components), self.fit_fingerprint_)
        self.quantizer_ = PerDimensionQuantizer(self.h, self.allow_large_h).fit(self.pca_.transform(X))
        return self

    def transform(self, X):
        X = self._start_transform(X)
        return self.quantizer_.transform(self.pca_.transform(X))

    def _manifest_fields(self):
        return {
            "p": int(self.n_components),
            "h": int(self.h),
            "dr2": self.pca_.to_manifest(),
            "q2": self.quantizer_.to_manifest(),
        }

    def _restore_fields(self, d):
        self.pca_ = _from_manifest(d["dr2"])
        self.quantizer_ = _from_manifest(d["q2"])


_KINDS = {
    cls.kind: cls
    for cls in (IdentityStressor, RandomDimensionDrop, PCADimensionDrop, GlobalQuantizer, PerDimensionQuantizer, FeatureCompressor)
}


def make_stressor(kind: str, p: int | None = None, h: int | None = None, seed=None, **kw) -> _Stressor:
    """Unfitted stressor of the given kind with its width/level parameters set."""
    if kind == "identity":
        return IdentityStressor()
    if kind == "dr1":
        return RandomDimensionDrop(n_keep=p, random_state=seed)
    if kind == "dr2":
        return PCADimensionDrop(n_components=p, **kw)
    if kind == "q1":
        return GlobalQuantizer(h=h, **kw)
    if kind == "q2":
        return PerDimensionQuantizer(h=h, **kw)
    if kind == "fc":
        return FeatureCompressor(n_components=p, h=h, **kw)
    raise ValueError(f"unknown stressor kind {kind!r}")


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------


def fit_identity(train) -> IdentityStressor:
    return IdentityStressor().fit(train)


def fit_dr1(n: int, p: int, rng) -> RandomDimensionDrop:
    est = RandomDimensionDrop(n_keep=p, random_state=rng)._fit_dims(int(n))
    est.fit_fingerprint_ = ""
    return est


def fit_dr2(train, p: int, mode: str = "project", eigensolver: str = "auto") -> PCADimensionDrop:
    return PCADimensionDrop(p, mode=mode, eigensolver=eigensolver).fit(train)


def fit_q1(train, h: int, allow_large_h: bool = False) -> GlobalQuantizer:
    return GlobalQuantizer(h, allow_large_h).fit(train)


def fit_q2(train, h: int, allow_large_h: bool = False) -> PerDimensionQuantizer:
    return PerDimensionQuantizer(h, allow_large_h).fit(train)


def fit_fc(train, p: int, h: int, allow_large_h: bool = False) -> FeatureCompressor:
    return FeatureCompressor(p, h, allow_large_h).fit(train)


def apply(model: _Stressor, m):
    """Transform ``m``; a FeatureMatrix in gives a FeatureMatrix out."""
    out = model.transform(m)
    if isinstance(m, FeatureMatrix):
        return FeatureMatrix(out, m.source_tag)
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _from_manifest(d: dict) -> _Stressor:
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported version {d.get('version')}")
    try:
        cls = _KINDS[d["kind"]]
    except KeyError:
        raise ValueError(f"unknown stressor kind {d.get('kind')!r}") from None
    est = cls(**d.get("params", {}))
    est.n_features_in_ = int(d["input_dims"])
    est.fit_fingerprint_ = d.get("fit_fingerprint", "")
    try:
        est._restore_fields(d)
    except (KeyError, IndexError, TypeError) as exc:
        raise ValueError(f"corrupt model payload: {exc!r}") from None
    return est


def save_model(model: _Stressor, path) -> None:
    _atomic_write(path, json.dumps(model.to_manifest(), indent=1, sort_keys=True) + "\n")


def load_model(path) -> _Stressor:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt model file: {exc}") from None
    return _from_manifest(d)
