import struct

import numpy as np
import pytest

from movla.container import ContainerError, load_container, save_container


def test_round_trip(tmp_path):
    arrays = {
        "w": np.arange(12, dtype=np.float32).reshape(3, 4),
        "idx": np.array([3, 1, 2], dtype=np.int64),
        "bytes": np.frombuffer(b"\x00\x01\xff", dtype=np.uint8).copy(),
    }
    meta = {"cfg": {"lr": 3e-4, "steps": 10}, "note": "probe"}
    save_container(tmp_path / "c.mvc", meta, arrays)
    meta2, arrays2 = load_container(tmp_path / "c.mvc")
    assert meta2 == meta
    for k in arrays:
        assert np.array_equal(arrays[k], arrays2[k])
        assert arrays[k].dtype == arrays2[k].dtype


def test_save_load_save_identical_bytes(tmp_path):
    arrays = {"a": np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)}
    save_container(tmp_path / "one.mvc", {"x": 1}, arrays)
    meta, loaded = load_container(tmp_path / "one.mvc")
    save_container(tmp_path / "two.mvc", meta, loaded)
    assert (tmp_path / "one.mvc").read_bytes() == (tmp_path / "two.mvc").read_bytes()


def test_version_mismatch_refused(tmp_path):
    save_container(tmp_path / "c.mvc", {}, {"a": np.zeros(1, np.float32)})
    raw = bytearray((tmp_path / "c.mvc").read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    (tmp_path / "bad.mvc").write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        load_container(tmp_path / "bad.mvc")


def test_truncated_blob_refused(tmp_path):
    save_container(tmp_path / "c.mvc", {}, {"a": np.zeros(100, np.float32)})
    raw = (tmp_path / "c.mvc").read_bytes()
    (tmp_path / "trunc.mvc").write_bytes(raw[:-10])
    with pytest.raises(ContainerError):
        load_container(tmp_path / "trunc.mvc")


def test_wrong_magic_refused(tmp_path):
    (tmp_path / "junk.mvc").write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ContainerError):
        load_container(tmp_path / "junk.mvc")
