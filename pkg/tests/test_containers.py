import numpy as np
import pytest

from pseudomask.containers import (
    FormatError,
    read_amap,
    read_array_blob,
    read_cemb,
    write_amap,
    write_array_blob,
    write_cemb,
)

from conftest import make_rng


def f32(a):
    return a.astype(np.float32).astype(np.float64)


def test_array_blob_round_trip(tmp_path):
    rng = make_rng("blob")
    arrays = [f32(rng.normal(size=(3, 4))), f32(rng.normal(size=7)), np.array([2.5])]
    write_array_blob(tmp_path / "x.bin", b"TEST", 1, [5, 9], arrays)
    meta, back = read_array_blob(tmp_path / "x.bin", b"TEST", 1)
    assert meta == [5, 9]
    for a, b in zip(arrays, back):
        assert np.array_equal(a, b)


def test_blob_magic_and_version_errors(tmp_path):
    write_array_blob(tmp_path / "x.bin", b"TEST", 1, [], [])
    with pytest.raises(FormatError, match="magic"):
        read_array_blob(tmp_path / "x.bin", b"NOPE", 1)
    with pytest.raises(FormatError, match="version"):
        read_array_blob(tmp_path / "x.bin", b"TEST", 2)


def test_amap_round_trip(tmp_path):
    rng = make_rng("amap")
    entries = [(3, f32(np.abs(rng.normal(size=(4, 6))))), (9, f32(np.abs(rng.normal(size=(2, 2)))))]
    write_amap(tmp_path / "m.amap", entries)
    back = read_amap(tmp_path / "m.amap")
    assert [cid for cid, _ in back] == [3, 9]
    for (_, a), (_, b) in zip(entries, back):
        assert np.array_equal(a, b)


def test_amap_rejects_negative_and_nonfinite(tmp_path):
    write_amap(tmp_path / "neg.amap", [(1, np.array([[-1.0, 0.0]]))])
    with pytest.raises(FormatError, match="negative"):
        read_amap(tmp_path / "neg.amap")
    write_amap(tmp_path / "nan.amap", [(1, np.array([[np.nan, 0.0]]))])
    with pytest.raises(FormatError, match="finite"):
        read_amap(tmp_path / "nan.amap")


def test_amap_rejects_trailing_bytes(tmp_path):
    write_amap(tmp_path / "m.amap", [(1, np.ones((2, 2)))])
    with open(tmp_path / "m.amap", "ab") as fh:
        fh.write(b"x")
    with pytest.raises(FormatError, match="trailing"):
        read_amap(tmp_path / "m.amap")


def test_amap_truncation_detected(tmp_path):
    write_amap(tmp_path / "m.amap", [(1, np.ones((4, 4)))])
    raw = (tmp_path / "m.amap").read_bytes()
    (tmp_path / "t.amap").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        read_amap(tmp_path / "t.amap")


def test_cemb_round_trip(tmp_path):
    rng = make_rng("cemb")
    entries = [(1, f32(rng.normal(size=8))), (4, f32(rng.normal(size=8)))]
    write_cemb(tmp_path / "c.cemb", entries)
    back = read_cemb(tmp_path / "c.cemb")
    assert [cid for cid, _ in back] == [1, 4]
    for (_, a), (_, b) in zip(entries, back):
        assert np.array_equal(a, b)
