"""Writer for the KVTR attention-trace interchange format.

This is the wire contract with the analysis tooling, reproduced here so
the exporter stays a standalone producer:

    magic   4 bytes  b"KVTR"
    version u32 LE   1
    L,H,Q,T u32 LE
    weights float32 LE, C order [layer][head][query][key]

plus ``<path>.meta.json``: UTF-8 JSON with keys ``tokens``, ``shots``,
``mandatory``, ``sink_count``, ``model``, ``params``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"KVTR"
VERSION = 1


def write_kvtr(weights: np.ndarray, path, *, tokens, shots, mandatory,
               sink_count: int = 4, model: str = "", params: dict | None = None) -> None:
    w = np.ascontiguousarray(weights, dtype="<f4")
    if w.ndim != 4:
        raise ValueError(f"weights must be 4-D [layer][head][query][key], got {w.shape}")
    L, H, Q, T = w.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<5I", VERSION, L, H, Q, T))
        fh.write(w.tobytes())
    meta = {
        "tokens": [int(t) for t in tokens],
        "shots": [[int(a), int(b)] for a, b in shots],
        "mandatory": [[int(a), int(b)] for a, b in mandatory],
        "sink_count": int(sink_count),
        "model": model,
        "params": params or {},
    }
    Path(str(path) + ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8"
    )
