"""Versioned model container.

Layout::

    b"WEAKSEP\\n"                     magic
    <uint64 little-endian>            header length in bytes
    <header>                          UTF-8 JSON, sorted keys
    <tensor bytes>                    float64 little-endian, C order, header order

The header holds ``format_version``, ``kind``, free-form ``meta`` and a list of
``{"name", "shape"}`` tensor records. No timestamps are written, so identical
content always produces identical bytes.
"""
import json
import struct

import numpy as np

MAGIC = b"WEAKSEP\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, kind, tensors, meta=None):
    records = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta or {}, "tensors": records},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load(path, kind=None):
    """Return ``(kind, meta, tensors)``; ``kind`` if given must match."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a weaksep model file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} model, found {header['kind']!r}")
    tensors = {}
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor {rec['name']!r}")
        tensors[rec["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                             offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    return header["kind"], header["meta"], tensors
