"""Named-tensor archive: one file holding a JSON manifest and raw float64 payloads.

Layout::

    b"CGRTENS1" | u64 little-endian manifest length | manifest (UTF-8 JSON) | payloads

The manifest maps each name to ``{"shape": [...], "offset": int}`` where the
offset is in bytes from the start of the payload block. Payloads are
little-endian IEEE-754 doubles in row-major order. Arbitrary JSON metadata
rides along under the ``"meta"`` key.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CGRTENS1"


class ArchiveError(ValueError):
    pass


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Any = None) -> None:
    entries, payloads, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for p in payloads:
            fh.write(p)
    tmp.replace(path)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], Any]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    base = 16 + mlen
    out = {}
    for name, ent in manifest["tensors"].items():
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + ent["offset"]
        buf = raw[start : start + 8 * count]
        if len(buf) != 8 * count:
            raise ArchiveError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return out, manifest.get("meta")
