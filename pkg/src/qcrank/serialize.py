"""Deterministic on-disk container for JSON metadata plus numpy arrays.

Layout: a magic line, a JSON manifest line (sorted keys), then for each
array (in sorted name order) a JSON descriptor line followed by the raw
little-endian bytes. Rewriting the same content is byte-identical, which
`np.savez` does not guarantee (zip metadata).
"""

import json

import numpy as np

from .errors import ParseError

_MAGIC = b"QCRANK-ARRAYS-1\n"


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_arrays(path, manifest: dict, arrays: dict) -> None:
    """Write `manifest` (JSON-serializable) and named arrays to `path`."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_canon_json(manifest) + b"\n")
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            desc = {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            fh.write(_canon_json(desc) + b"\n")
            fh.write(arr.tobytes())


def load_arrays(path):
    """Read back (manifest, arrays) written by `save_arrays`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ParseError(f"{path}: not a qcrank array container")
        manifest = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        while True:
            line = fh.readline()
            if not line:
                break
            desc = json.loads(line.decode("utf-8"))
            dtype = np.dtype(desc["dtype"])
            shape = tuple(desc["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[desc["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return manifest, arrays
