import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from featstress.classifier import predict, train
from featstress.featstore import (
    HEADER_SIZE,
    DatasetSplit,
    FeatureMatrix,
    FmatError,
    LabelSet,
    from_bytes,
    generate_synthetic,
    load_features,
    load_labels,
    load_split,
    save_features,
    save_labels,
    save_split,
    to_bytes,
)
from featstress.numerics import l2_normalize


def test_round_trip_3x4(tmp_path):
    m = FeatureMatrix(np.arange(12, dtype=np.float32).reshape(3, 4) / 7, "demo")
    save_features(m, tmp_path / "m.fmat")
    back = load_features(tmp_path / "m.fmat")
    assert back.source_tag == "demo"
    assert back.values.dtype == np.float32
    assert back.values.tobytes() == m.values.tobytes()


def test_header_layout_matches_byte_table():
    # 4 magic + 2 version + 1 dtype + 1 reserved + 8 rows + 8 dims + 2 tag len + 2 reserved
    assert HEADER_SIZE == 4 + 2 + 1 + 1 + 8 + 8 + 2 + 2 == 28
    raw = to_bytes(np.array([[1.5, -2.0]], dtype=np.float32), "ab")
    assert raw[:4] == b"FMAT"
    assert struct.unpack_from("<HBBQQHH", raw, 4) == (1, 1, 0, 1, 2, 2, 0)
    assert raw[28:30] == b"ab"
    assert np.frombuffer(raw[30:], "<f4").tolist() == [1.5, -2.0]


@pytest.mark.parametrize(
    "tag, size",
    [("", 28 + 4), ("synthetic-v1", 28 + 12 + 4), ("synthetic-v01", 45)],
)
def test_one_by_one_file_size(tmp_path, tag, size):
    path = tmp_path / "one.fmat"
    save_features(FeatureMatrix(np.zeros((1, 1), dtype=np.float32), tag), path)
    assert os.path.getsize(path) == size


def test_bad_magic(tmp_path):
    raw = bytearray(to_bytes(np.ones((2, 2), dtype=np.float32)))
    raw[0:4] = b"FMAX"
    with pytest.raises(FmatError, match="bad magic") as err:
        from_bytes(bytes(raw))
    assert err.value.offset == 0


def test_non_finite_payload_rejected_with_row():
    raw = bytearray(to_bytes(np.ones((2, 2), dtype=np.float32)))
    raw[HEADER_SIZE + 4 : HEADER_SIZE + 8] = struct.pack("<f", float("nan"))
    with pytest.raises(FmatError, match="non-finite value at row 0") as err:
        from_bytes(bytes(raw))
    assert err.value.offset == HEADER_SIZE + 4


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b[:10], "truncated header"),
        (lambda b: b[:-1], "truncated payload"),
        (lambda b: b + b"\0", "trailing bytes"),
        (lambda b: b[:4] + struct.pack("<H", 7) + b[6:], "unsupported version"),
        (lambda b: b[:6] + b"\x09" + b[7:], "unknown dtype"),
        (lambda b: b[:8] + struct.pack("<QQ", 1 << 40, 1 << 40) + b[24:], "dimension overflow"),
        (lambda b: b[:8] + struct.pack("<Q", 0) + b[16:], "empty shape"),
    ],
)
def test_malformed_headers(mutate, message):
    raw = to_bytes(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(FmatError, match=message):
        from_bytes(mutate(raw))


def test_empty_matrix_rejected_before_write(tmp_path):
    path = tmp_path / "empty.fmat"
    with pytest.raises(ValueError):
        save_features(np.zeros((3, 0), dtype=np.float32), path)
    assert not path.exists()


def test_nan_matrix_rejected():
    with pytest.raises(ValueError, match="non-finite value at row 0"):
        FeatureMatrix(np.array([[np.nan, 1.0], [0.0, 2.0]]))


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_directory_leaves_nothing(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        with pytest.raises(OSError):
            save_features(FeatureMatrix(np.ones((2, 2))), ro / "x.fmat")
        assert list(ro.iterdir()) == []
    finally:
        ro.chmod(0o700)


def test_failed_write_leaves_no_partial_file(tmp_path, monkeypatch):
    path = tmp_path / "x.fmat"

    def boom(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr("featstress.featstore.os.replace", boom)
    with pytest.raises(OSError, match="disk full"):
        save_features(FeatureMatrix(np.ones((2, 2))), path)
    assert list(tmp_path.iterdir()) == []


def test_missing_directory_is_io_error(tmp_path):
    with pytest.raises(OSError):
        save_features(FeatureMatrix(np.ones((2, 2))), tmp_path / "nope" / "x.fmat")


finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=60, deadline=None)
@given(
    values=hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9), elements=finite_f32),
    tag=st.text(max_size=20),
)
def test_round_trip_property(tmp_path_factory, values, tag):
    path = tmp_path_factory.mktemp("rt") / "m.fmat"
    save_features(FeatureMatrix(values, tag), path)
    back = load_features(path)
    assert back.source_tag == tag
    assert back.values.tobytes() == values.tobytes()


def test_labels_csv_round_trip(tmp_path):
    multi = LabelSet("multi_label", 4, ((0, 2), (), (3,), (1, 2, 3)))
    save_labels(multi, tmp_path / "l.csv")
    text = (tmp_path / "l.csv").read_text()
    assert text.splitlines()[:2] == ["# kind=multi_label classes=4", "row,labels"]
    assert "0,0;2" in text
    assert load_labels(tmp_path / "l.csv") == multi

    single = LabelSet.from_ids([2, 0, 1, 1])
    save_labels(single, tmp_path / "s.csv")
    assert load_labels(tmp_path / "s.csv") == single


def test_label_invariants():
    with pytest.raises(ValueError):
        LabelSet("single_label", 2, ((0,), (0, 1)))
    with pytest.raises(ValueError):
        LabelSet("multi_label", 2, ((2,),))


def test_split_file_round_trip(tmp_path):
    split = DatasetSplit([0, 3, 4], [1, 2])
    save_split(split, tmp_path / "split.txt")
    assert (tmp_path / "split.txt").read_text() == "train: 0,3,4\ntest: 1,2\n"
    assert load_split(tmp_path / "split.txt") == split


def test_split_invariants():
    with pytest.raises(ValueError, match="overlap"):
        DatasetSplit([0, 1], [1, 2])
    with pytest.raises(ValueError):
        DatasetSplit([], [1])
    with pytest.raises(ValueError):
        DatasetSplit([0], [5]).check_rows(3)


def test_synthetic_is_deterministic():
    a = generate_synthetic(classes=3, per_class=10, dims=12, informative_dims=4, seed=9)
    b = generate_synthetic(classes=3, per_class=10, dims=12, informative_dims=4, seed=9)
    c = generate_synthetic(classes=3, per_class=10, dims=12, informative_dims=4, seed=10)
    assert a[0].values.tobytes() == b[0].values.tobytes()
    assert a[1] == b[1] and a[2] == b[2]
    assert a[0].values.tobytes() != c[0].values.tobytes()


def test_synthetic_split_is_sound_and_stratified():
    features, labels, split = generate_synthetic(classes=3, per_class=11, dims=8, informative_dims=2, seed=1)
    train, test = set(split.train_indices), set(split.test_indices)
    assert not train & test
    assert train | test == set(range(features.rows))
    ids = labels.class_ids()
    for k in range(3):
        assert sum(ids[i] == k for i in train) == 5


def test_synthetic_single_scale():
    # With one shared scale, noise-only columns share the same spread.
    features, labels, _ = generate_synthetic(
        classes=2, per_class=4000, dims=6, informative_dims=0, noise_scale=1.0, scale_spread=1.0, seed=3
    )
    std = features.values.std(axis=0)
    np.testing.assert_allclose(std, 1.0, rtol=0.03)


def test_synthetic_means_differ_only_on_informative_dims():
    features, labels, _ = generate_synthetic(
        classes=3, per_class=3000, dims=20, informative_dims=4, noise_scale=0.05, scale_spread=1.0, seed=8
    )
    ids = labels.class_ids()
    means = np.array([features.values[ids == k].mean(axis=0) for k in range(3)])
    spread = means.max(axis=0) - means.min(axis=0)
    assert (spread > 0.05).sum() == 4
    assert np.all(np.sort(spread)[:16] < 0.01)


def test_synthetic_rejects_bad_counts():
    with pytest.raises(ValueError):
        generate_synthetic(classes=1)
    with pytest.raises(ValueError):
        generate_synthetic(dims=4, informative_dims=5)


def test_synthetic_two_class_example_is_separable():
    features, labels, split = generate_synthetic(
        classes=2, per_class=100, dims=50, informative_dims=10, noise_scale=0.1, scale_spread=1.0, seed=0
    )
    X = l2_normalize(features.values)
    clf = train(X, labels, split)
    test = list(split.test_indices)
    acc = np.mean(predict(clf, X[test]) == labels.class_ids()[test])
    assert acc >= 0.99


def test_labels_keep_kind_and_class_count(tmp_path):
    # one id per row but multi_label, and class 3 never used
    labels = LabelSet("multi_label", 4, ((0,), (2,), (1,)))
    save_labels(labels, tmp_path / "l.csv")
    assert load_labels(tmp_path / "l.csv") == labels


def test_labels_without_metadata_line_are_inferred(tmp_path):
    (tmp_path / "l.csv").write_text("row,labels\n0,1\n1,0\n2,0;2\n")
    back = load_labels(tmp_path / "l.csv")
    assert back.kind == "multi_label" and back.classes == 3
    (tmp_path / "s.csv").write_text("row,labels\n0,1\n1,0\n")
    assert load_labels(tmp_path / "s.csv").kind == "single_label"
