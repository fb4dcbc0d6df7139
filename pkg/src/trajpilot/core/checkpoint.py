"""Named-tensor container used for checkpoints and visual-token files.

Layout (all little-endian)::

    b"TRAJPILOT-TENSORS v1\n"
    <uint64 header length><header JSON, utf-8>
    <raw float64 data for each tensor, in header order>

The header is ``{"meta": {...}, "tensors": [{"name", "shape", "offset"}, ...]}``
with offsets in bytes relative to the start of the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRAJPILOT-TENSORS v1\n"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, offset = [], 0
    arrays = []
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        arrays.append(arr)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a trajpilot tensor file (bad header)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = pos + entry["offset"]
        out[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).copy()
    return out, header["meta"]


def save_module(path, module, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in module.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = v
    save_tensors(path, tensors, meta)


def load_module_state(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    tensors, meta = load_tensors(path)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    extra = {k[6:]: v for k, v in tensors.items() if k.startswith("extra/")}
    return params, extra, meta
