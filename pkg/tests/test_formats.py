import struct

import numpy as np
import pytest

from distsage import formats
from distsage.partition import build_partitions

from conftest import random_graph


def test_arrays_roundtrip(tmp_path):
    arrays = {
        "a": np.arange(6, dtype=np.int64).reshape(2, 3),
        "f": np.linspace(0, 1, 5, dtype=np.float32),
        "m": np.array([1, 0, 1], dtype=np.uint8),
        "d": np.array([1.5], dtype=np.float64),
        "empty": np.zeros(0, dtype=np.int64),
    }
    formats.write_arrays(tmp_path / "x.mdg", arrays)
    back = formats.read_arrays(tmp_path / "x.mdg")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert np.array_equal(back[k], arrays[k])


def test_mdg_header_layout(tmp_path):
    formats.write_arrays(tmp_path / "x.mdg", {"ab": np.array([7], dtype=np.int64)})
    raw = (tmp_path / "x.mdg").read_bytes()
    assert raw[:4] == b"MDG1"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<H", raw, 12) == (2,)
    assert raw[14:16] == b"ab"
    assert struct.unpack_from("<BBQ", raw, 16) == (0, 1, 1)
    assert struct.unpack_from("<q", raw, 26) == (7,)


def test_bad_magic(tmp_path):
    (tmp_path / "x.mdg").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(formats.FormatError):
        formats.read_arrays(tmp_path / "x.mdg")
    (tmp_path / "x.mdt").write_bytes(b"MDT1" + struct.pack("<QQ", 2, 2) + bytes(4))
    with pytest.raises(formats.FormatError):
        formats.read_matrix(tmp_path / "x.mdt")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(formats.FormatError):
        formats.write_arrays(tmp_path / "x.mdg", {"c": np.zeros(2, dtype=np.complex64)})


def test_matrix_roundtrip(tmp_path):
    m = np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)
    formats.write_matrix(tmp_path / "m.mdt", m)
    raw = (tmp_path / "m.mdt").read_bytes()
    assert raw[:4] == b"MDT1" and struct.unpack_from("<QQ", raw, 4) == (7, 3)
    assert np.array_equal(formats.read_matrix(tmp_path / "m.mdt"), m)


def test_partition_dir_roundtrip(tmp_path):
    g = random_graph(40, 150, 0)
    assign = np.random.default_rng(0).integers(0, 3, 40)
    parts, book, _ = build_partitions(g, assign, 3)
    feats = np.arange(40 * 2, dtype=np.float32).reshape(40, 2)
    nd = {"label": np.arange(40, dtype=np.int64)}
    formats.write_partition_dir(tmp_path, parts, book, nd, feats)
    for p in parts:
        part, b, data, f = formats.read_partition_dir(formats.part_dir(tmp_path, p.part_id))
        lo, hi = book.node_range(p.part_id)
        assert part.num_core == p.num_core and part.part_id == p.part_id
        assert np.array_equal(part.local_to_global, p.local_to_global)
        assert np.array_equal(part.local_graph.col_indices, p.local_graph.col_indices)
        assert np.array_equal(b.node_perm, book.node_perm)
        assert np.array_equal(f, feats[lo:hi])
        assert np.array_equal(data["label"], np.arange(lo, hi))
