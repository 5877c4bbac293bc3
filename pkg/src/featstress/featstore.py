"""Feature matrices, label sets and splits: in memory and on disk.

Binary feature files use the FMAT container::

    offset  size  field
    0       4     magic b"FMAT"
    4       2     format version, u16 = 1
    6       1     dtype code, u8 (1 = float32, 2 = float64)
    7       1     reserved, u8 = 0
    8       8     rows, u64
    16      8     dims, u64
    24      2     source tag length in bytes, u16
    26      2     reserved, u16 = 0
    28      n     source tag, UTF-8
    28+n    ...   payload, rows*dims scalars, row-major

All integers and scalars are little-endian. Feature files are written as
float32; float64 is used for model blobs that must round-trip losslessly.
"""
from __future__ import annotations

import base64
import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream

__all__ = [
    "DatasetSplit",
    "FeatureMatrix",
    "FmatError",
    "LabelSet",
    "decode_array",
    "encode_array",
    "from_bytes",
    "generate_synthetic",
    "load_features",
    "load_labels",
    "load_split",
    "save_features",
    "save_labels",
    "save_split",
    "to_bytes",
]

MAGIC = b"FMAT"
VERSION = 1
_HEADER = struct.Struct("<4sHBBQQHH")
HEADER_SIZE = _HEADER.size  # 28
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_MAX_ELEMENTS = 1 << 48


class FmatError(ValueError):
    """Malformed FMAT data; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Dense rows-by-dims matrix of descriptors plus a provenance tag."""

    values: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if v.ndim != 2:
            raise ValueError(f"FeatureMatrix: expected 2-D values, got {v.ndim}-D")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"FeatureMatrix: empty shape {v.shape}")
        bad = ~np.isfinite(v)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise ValueError(f"FeatureMatrix: non-finite value at row {row}")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def take(self, indices) -> "FeatureMatrix":
        return FeatureMatrix(self.values[np.asarray(indices, dtype=np.intp)], self.source_tag)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


# ---------------------------------------------------------------------------
# FMAT codec
# ---------------------------------------------------------------------------


def to_bytes(values, source_tag: str = "", dtype="<f4") -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"FMAT: need a non-empty 2-D matrix, got shape {arr.shape}")
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _CODES:
        raise ValueError(f"FMAT: unsupported dtype {dt}")
    tag = source_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ValueError("FMAT: source tag longer than 65535 bytes")
    header = _HEADER.pack(MAGIC, VERSION, _CODES[dt], 0, arr.shape[0], arr.shape[1], len(tag), 0)
    return header + tag + np.ascontiguousarray(arr, dtype=dt).tobytes()


def from_bytes(buf: bytes) -> tuple[np.ndarray, str]:
    if len(buf) < HEADER_SIZE:
        raise FmatError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", len(buf))
    magic, version, code, reserved, rows, dims, tag_len, reserved2 = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FmatError("bad magic", 0)
    if version != VERSION:
        raise FmatError(f"unsupported version {version}", 4)
    if code not in _DTYPES:
        raise FmatError(f"unknown dtype code {code}", 6)
    if reserved != 0:
        raise FmatError("reserved byte must be zero", 7)
    if rows < 1 or dims < 1:
        raise FmatError(f"empty shape {rows}x{dims}", 8)
    if rows * dims > _MAX_ELEMENTS:
        raise FmatError(f"dimension overflow: {rows}x{dims}", 8)
    if reserved2 != 0:
        raise FmatError("reserved field must be zero", 26)
    tag_end = HEADER_SIZE + tag_len
    if len(buf) < tag_end:
        raise FmatError("truncated source tag", len(buf))
    try:
        tag = buf[HEADER_SIZE:tag_end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FmatError("source tag is not valid UTF-8", HEADER_SIZE + exc.start) from None
    dt = _DTYPES[code]
    expected = rows * dims * dt.itemsize
    have = len(buf) - tag_end
    if have < expected:
        raise FmatError(f"truncated payload: {have} of {expected} bytes", len(buf))
    if have > expected:
        raise FmatError(f"{have - expected} trailing bytes after payload", tag_end + expected)
    values = np.frombuffer(buf, dtype=dt, count=rows * dims, offset=tag_end).reshape(rows, dims)
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = (int(i) for i in np.argwhere(bad)[0])
        raise FmatError(f"non-finite value at row {r}", tag_end + (r * dims + c) * dt.itemsize)
    return values.astype(dt.newbyteorder("="), copy=True), tag


def encode_array(values) -> str:
    """Base64 FMAT blob (float64) for embedding numeric arrays in JSON manifests."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return base64.b64encode(to_bytes(arr, dtype="<f8")).decode("ascii")


def decode_array(blob: str) -> np.ndarray:
    try:
        raw = base64.b64decode(blob.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise ValueError(f"corrupt base64 payload: {exc}") from None
    values, _ = from_bytes(raw)
    return values.astype(np.float64)


def _atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def save_features(m: FeatureMatrix, path) -> None:
    """Write ``m`` as a float32 FMAT file; nothing is left behind on failure."""
    if not isinstance(m, FeatureMatrix):
        m = FeatureMatrix(np.asarray(m))
    _atomic_write(path, to_bytes(m.values, m.source_tag))


def load_features(path) -> FeatureMatrix:
    values, tag = from_bytes(Path(path).read_bytes())
    return FeatureMatrix(values, tag)


# ---------------------------------------------------------------------------
# Labels and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSet:
    """Per-row class membership.

    ``assignments[i]`` is a tuple of class ids; single-label sets hold
    exactly one id per row.
    """

    kind: str
    classes: int
    assignments: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.kind not in ("multi_label", "single_label"):
            raise ValueError(f"LabelSet: unknown kind {self.kind!r}")
        if self.classes < 1:
            raise ValueError("LabelSet: need at least one class")
        rows = tuple(tuple(sorted({int(c) for c in ids})) for ids in self.assignments)
        for i, ids in enumerate(rows):
            if any(c < 0 or c >= self.classes for c in ids):
                raise ValueError(f"LabelSet: row {i} has a class id outside [0, {self.classes})")
            if self.kind == "single_label" and len(ids) != 1:
                raise ValueError(f"LabelSet: single_label row {i} has {len(ids)} ids")
        object.__setattr__(self, "assignments", rows)

    def __len__(self) -> int:
        return len(self.assignments)

    @classmethod
    def from_ids(cls, ids, classes: int | None = None) -> "LabelSet":
        ids = [int(i) for i in ids]
        return cls("single_label", classes or max(ids) + 1, tuple((i,) for i in ids))

    def indicator(self) -> np.ndarray:
        """Boolean rows-by-classes membership matrix."""
        out = np.zeros((len(self), self.classes), dtype=bool)
        for i, ids in enumerate(self.assignments):
            out[i, list(ids)] = True
        return out

    def class_ids(self) -> np.ndarray:
        if self.kind != "single_label":
            raise ValueError("class_ids: only defined for single_label sets")
        return np.array([ids[0] for ids in self.assignments], dtype=np.intp)

    def take(self, indices) -> "LabelSet":
        return LabelSet(self.kind, self.classes, tuple(self.assignments[i] for i in indices))

    def as_multi_label(self) -> "LabelSet":
        return LabelSet("multi_label", self.classes, self.assignments)


@dataclass(frozen=True)
class DatasetSplit:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        train = tuple(int(i) for i in self.train_indices)
        test = tuple(int(i) for i in self.test_indices)
        if not train or not test:
            raise ValueError("DatasetSplit: train and test must both be non-empty")
        if min(train + test) < 0:
            raise ValueError("DatasetSplit: negative row index")
        if set(train) & set(test):
            raise ValueError("DatasetSplit: train and test overlap")
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)

    def check_rows(self, rows: int) -> None:
        if max(self.train_indices + self.test_indices) >= rows:
            raise ValueError(f"DatasetSplit: index out of range for {rows} rows")


def save_labels(labels: LabelSet, path) -> None:
    buf = io.StringIO()
    buf.write(f"# kind={labels.kind} classes={labels.classes}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "labels"])
    for i, ids in enumerate(labels.assignments):
        writer.writerow([i, ";".join(str(c) for c in ids)])
    _atomic_write(path, buf.getvalue())


def load_labels(path, kind: str | None = None, classes: int | None = None) -> LabelSet:
    """Read a labels CSV.

    An optional first line ``# kind=<kind> classes=<count>`` fixes both
    values. Without it (or without the explicit arguments, which win)
    ``kind`` is single_label when every row carries exactly one id and
    ``classes`` is the largest id seen plus one.
    """
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            meta = dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)
            kind = kind or meta.get("kind")
            if classes is None and "classes" in meta:
                classes = int(meta["classes"])
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "labels"]:
            raise ValueError(f"{path}: expected header 'row,labels', got {header}")
        rows: dict[int, tuple[int, ...]] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields")
            idx = int(rec[0])
            if idx in rows:
                raise ValueError(f"{path}:{lineno}: duplicate row {idx}")
            rows[idx] = tuple(int(c) for c in rec[1].split(";") if c.strip() != "")
    if sorted(rows) != list(range(len(rows))):
        raise ValueError(f"{path}: row ids must be 0..{len(rows) - 1}")
    assignments = tuple(rows[i] for i in range(len(rows)))
    if kind is None:
        kind = "single_label" if all(len(a) == 1 for a in assignments) else "multi_label"
    if classes is None:
        classes = max((max(a) for a in assignments if a), default=0) + 1
    return LabelSet(kind, classes, assignments)


def save_split(split: DatasetSplit, path) -> None:
    text = (
        "train: " + ",".join(map(str, split.train_indices)) + "\n"
        "test: " + ",".join(map(str, split.test_indices)) + "\n"
    )
    _atomic_write(path, text)


def load_split(path) -> DatasetSplit:
    parts = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in ("train", "test") or key in parts:
            raise ValueError(f"{path}: unexpected line {line[:40]!r}")
        parts[key] = [int(x) for x in rest.split(",") if x.strip()]
    if set(parts) != {"train", "test"}:
        raise ValueError(f"{path}: need both 'train:' and 'test:' lines")
    return DatasetSplit(parts["train"], parts["test"])


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

SYNTHETIC_TAG = "synthetic-v1"


def generate_synthetic(
    classes: int = 4,
    per_class: int = 150,
    dims: int = 256,
    informative_dims: int = 32,
    noise_scale: float = 0.3,
    scale_spread: float = 100.0,
    seed: int = 42,
    label_kind: str = "single_label",
):
    """Gaussian class clusters with heterogeneous per-dimension scales.

    Class means are drawn from N(0, 1) on ``informative_dims`` randomly
    chosen dimensions and are zero elsewhere; every row adds isotropic
    N(0, noise_scale**2) noise. Dimension ``t`` is then multiplied by a
    factor drawn log-uniformly from ``[1, scale_spread]``.

    Returns ``(FeatureMatrix, LabelSet, DatasetSplit)``; the split is a
    stratified 50/50 partition of each class.
    """
    if classes < 2:
        raise ValueError("generate_synthetic: need at least 2 classes")
    if per_class < 2:
        raise ValueError("generate_synthetic: need at least 2 rows per class")
    if dims < 1 or not 0 <= informative_dims <= dims:
        raise ValueError("generate_synthetic: need 0 <= informative_dims <= dims and dims >= 1")
    if not noise_scale > 0:
        raise ValueError("generate_synthetic: noise_scale must be positive")
    if not scale_spread >= 1:
        raise ValueError("generate_synthetic: scale_spread must be >= 1")
    if label_kind not in ("single_label", "multi_label"):
        raise ValueError(f"generate_synthetic: unknown label_kind {label_kind!r}")

    rng = RngStream(seed, "synthetic").generator()
    informative = np.sort(rng.permutation(dims)[:informative_dims])
    means = np.zeros((classes, dims))
    means[:, informative] = rng.standard_normal((classes, informative_dims))
    scales = np.exp(rng.uniform(0.0, np.log(scale_spread), size=dims))

    y = np.repeat(np.arange(classes), per_class)
    X = (means[y] + noise_scale * rng.standard_normal((y.size, dims))) * scales

    n_train = per_class // 2
    train, test = [], []
    for k in range(classes):
        rows = np.flatnonzero(y == k)[rng.permutation(per_class)]
        train.extend(sorted(rows[:n_train].tolist()))
        test.extend(sorted(rows[n_train:].tolist()))

    labels = LabelSet(label_kind, classes, tuple((int(k),) for k in y))
    return (
        FeatureMatrix(X.astype(np.float32), SYNTHETIC_TAG),
        labels,
        DatasetSplit(sorted(train), sorted(test)),
    )
