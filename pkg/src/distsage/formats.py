"""On-disk layouts.

``MDG1`` is a little-endian container of named arrays::

    magic  b"MDG1"
    u32    version (1)
    u32    array count
    per array:
        u16 name length, name (utf-8)
        u8  dtype code, u8 ndim, u64 * ndim shape
        raw little-endian data

``MDT1`` is a row-major float32 matrix: magic, u64 rows, u64 cols, data.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .graph import Graph, LocalPartition, PartitionBook

MDG_MAGIC = b"MDG1"
MDT_MAGIC = b"MDT1"
MDG_VERSION = 1

_DTYPES = {0: "<i8", 1: "<f4", 2: "u1", 3: "<i4", 4: "<f8"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def write_arrays(path, arrays: dict) -> None:
    parts = [MDG_MAGIC, struct.pack("<II", MDG_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<").str)
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_arrays(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MDG_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != MDG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        dtype = np.dtype(_DTYPES[code])
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape).copy()
        off += n * dtype.itemsize
    return out


def write_matrix(path, mat) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f4")
    if mat.ndim != 2:
        raise FormatError("matrix must be 2-D")
    Path(path).write_bytes(MDT_MAGIC + struct.pack("<QQ", *mat.shape) + mat.tobytes())


def read_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != MDT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    rows, cols = struct.unpack_from("<QQ", buf, 4)
    if len(buf) != 20 + 4 * rows * cols:
        raise FormatError(f"{path}: truncated matrix")
    return np.frombuffer(buf, dtype="<f4", offset=20).reshape(rows, cols).astype(np.float32)


def save_book(path, book: PartitionBook) -> None:
    write_arrays(path, {
        "num_parts": np.array([book.num_parts]),
        "node_range_starts": book.node_range_starts,
        "edge_range_starts": book.edge_range_starts,
        "node_perm": book.node_perm,
        "node_perm_inv": book.node_perm_inv,
        "edge_perm": book.edge_perm,
        "edge_perm_inv": book.edge_perm_inv,
    })


def load_book(path) -> PartitionBook:
    a = read_arrays(path)
    return PartitionBook(int(a["num_parts"][0]), a["node_range_starts"], a["edge_range_starts"],
                         a["node_perm"], a["node_perm_inv"], a["edge_perm"], a["edge_perm_inv"])


def save_partition(path, part: LocalPartition) -> None:
    g = part.local_graph
    write_arrays(path, {
        "header": np.array([part.part_id, part.num_core, g.num_nodes]),
        "row_offsets": g.row_offsets,
        "col_indices": g.col_indices,
        "edge_ids": g.edge_ids,
        "local_to_global": part.local_to_global,
        "edge_local_to_global": part.edge_local_to_global,
    })


def load_partition(path) -> LocalPartition:
    a = read_arrays(path)
    part_id, num_core, num_nodes = (int(x) for x in a["header"])
    g = Graph(num_nodes, a["row_offsets"], a["col_indices"], a["edge_ids"])
    return LocalPartition(part_id, g, a["local_to_global"], num_core, a["edge_local_to_global"])


def part_dir(root, part_id: int) -> Path:
    return Path(root) / f"part{part_id}"


def write_partition_dir(root, parts, book, node_data: dict | None = None,
                        features: np.ndarray | None = None) -> None:
    """Write one directory per partition plus a top-level book.

    ``node_data`` arrays and ``features`` rows are indexed by the global IDs
    of ``book``; each partition receives only its core rows.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_book(root / "book.mdg", book)
    for part in parts:
        d = part_dir(root, part.part_id)
        os.makedirs(d, exist_ok=True)
        save_partition(d / "graph.mdg", part)
        save_book(d / "book.mdg", book)
        lo, hi = book.node_range(part.part_id)
        if node_data:
            write_arrays(d / "node_data.mdg", {k: np.asarray(v)[lo:hi] for k, v in node_data.items()})
        if features is not None:
            write_matrix(d / "feat.mdt", features[lo:hi])


def read_partition_dir(path):
    """Return ``(LocalPartition, PartitionBook, node_data, features)`` from one partition directory."""
    d = Path(path)
    part = load_partition(d / "graph.mdg")
    book = load_book(d / "book.mdg")
    node_data = read_arrays(d / "node_data.mdg") if (d / "node_data.mdg").exists() else {}
    feats = read_matrix(d / "feat.mdt") if (d / "feat.mdt").exists() else None
    return part, book, node_data, feats
