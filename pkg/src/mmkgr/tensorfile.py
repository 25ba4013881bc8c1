"""Named-tensor container file.

Layout: one UTF-8 JSON header line (metadata dict plus an ordered block
list of name/shape/dtype), a newline, then the raw little-endian
float64 bytes of each block in C order, concatenated in header order.
Writing the same tensors twice produces byte-identical files, and a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "mmkgr-tensors-v1"


class TensorFileError(ValueError):
    """Malformed container or header/payload mismatch."""


def save_tensors(path, blocks: dict[str, np.ndarray], meta: dict | None = None):
    header = {
        "magic": MAGIC,
        "meta": meta or {},
        "blocks": [
            {"name": name, "shape": list(arr.shape), "dtype": "float64"}
            for name, arr in blocks.items()
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TensorFileError(f"{path}: bad header ({exc})") from exc
        if header.get("magic") != MAGIC:
            raise TensorFileError(f"{path}: not a tensor container")
        blocks: dict[str, np.ndarray] = {}
        for spec in header["blocks"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise TensorFileError(f"{path}: truncated block {spec['name']!r}")
            blocks[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise TensorFileError(f"{path}: trailing bytes after last block")
    return blocks, header["meta"]
