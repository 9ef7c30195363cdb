import struct

import numpy as np
import pytest

from reprosim.errors import FormatError
from reprosim.fileio import MAGIC_WEIGHTS, load_weights, save_weights


def test_roundtrip_preserves_values_and_order(tmp_path):
    rng = np.random.default_rng(0)
    items = [
        ("weights", rng.normal(size=(3, 4, 2))),
        ("bias", rng.normal(size=5)),
        ("scalar-ish", np.array([1.5])),
    ]
    path = tmp_path / "w.rpgw"
    save_weights(path, items)
    loaded = load_weights(path)
    assert list(loaded) == [name for name, _ in items]
    for name, arr in items:
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr)


def test_wire_layout_is_little_endian(tmp_path):
    path = tmp_path / "w.rpgw"
    save_weights(path, [("ab", np.array([[1.0, 2.0]]))])
    raw = path.read_bytes()
    assert raw[:4] == MAGIC_WEIGHTS
    version, count = struct.unpack("<II", raw[4:12])
    assert (version, count) == (1, 1)
    name_len = struct.unpack("<I", raw[12:16])[0]
    assert name_len == 2 and raw[16:18] == b"ab"
    rank, d0, d1 = struct.unpack("<III", raw[18:30])
    assert (rank, d0, d1) == (2, 1, 2)
    assert struct.unpack("<2d", raw[30:46]) == (1.0, 2.0)
    assert len(raw) == 46


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "w.rpgw"
    save_weights(path, [("a", np.zeros(2))])
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_weights(path)


def test_truncated_rejected(tmp_path):
    path = tmp_path / "w.rpgw"
    save_weights(path, [("a", np.arange(8.0))])
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_weights(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "w.rpgw"
    save_weights(path, [("a", np.zeros(2))])
    path.write_bytes(path.read_bytes() + b"JUNK")
    with pytest.raises(FormatError, match="trailing"):
        load_weights(path)


def test_dim_overflow_rejected(tmp_path):
    path = tmp_path / "w.rpgw"
    save_weights(path, [("a", np.zeros(1))])
    raw = bytearray(path.read_bytes())
    # rank 1 tensor named "a": dims start after magic(4)+ver(4)+count(4)+len(4)+name(1)+rank(4)
    struct.pack_into("<I", raw, 21, 2**31 - 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_weights(path)


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(FormatError, match="duplicate"):
        save_weights(tmp_path / "w.rpgw", [("a", np.zeros(1)), ("a", np.zeros(1))])


def test_empty_tensor_roundtrips(tmp_path):
    path = tmp_path / "w.rpgw"
    save_weights(path, [("empty", np.zeros((0, 4, 4)))])
    loaded = load_weights(path)
    assert loaded["empty"].shape == (0, 4, 4)
