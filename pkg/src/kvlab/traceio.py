"""Attention-trace container and its on-disk format.

A trace is a dense ``[layer][head][query][key]`` tensor of post-softmax
attention weights plus token/segment metadata. Files use the ``KVTR``
layout so traces written by any producer (the toy model here, or an
external exporter) are interchangeable:

    magic   4 bytes  b"KVTR"
    version u32 LE   1
    L,H,Q,T u32 LE   tensor dimensions
    weights float32 LE, C order (layer-major, then head, query, key)

plus a UTF-8 JSON sidecar at ``<path>.meta.json`` with keys ``tokens``,
``shots``, ``mandatory``, ``sink_count``, ``model`` and ``params``.

Weights are stored as float32; row sums are expected to hold to 1e-4,
tolerated with a warning up to 1e-2, and rejected beyond that.

The query axis holds the *last* Q positions of the sequence: row ``q``
belongs to absolute query position ``T - Q + q``, so a full prefill
trace has Q == T and a last-row trace has Q == 1.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import FormatError, TraceError

MAGIC = b"KVTR"
VERSION = 1
ROW_SUM_TOL = 1e-4
ROW_SUM_HARD_TOL = 1e-2

# plausibility cap on L*H*Q*T when reading foreign files (256 MiB of f32)
MAX_ELEMENTS = 1 << 26

MODE_FULL = "full"
MODE_LAST_ROW = "last-row"


@dataclass
class TraceMeta:
    """Sidecar metadata: token ids, shot spans and provenance."""

    tokens: list = field(default_factory=list)
    shots: list = field(default_factory=list)        # [start, end) pairs
    mandatory: list = field(default_factory=list)    # [start, end) pairs
    sink_count: int = 4
    model: str = ""
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["shots"] = [[int(a), int(b)] for a, b in self.shots]
        d["mandatory"] = [[int(a), int(b)] for a, b in self.mandatory]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TraceMeta":
        d = json.loads(text)
        return cls(
            tokens=d.get("tokens", []),
            shots=[(int(a), int(b)) for a, b in d.get("shots", [])],
            mandatory=[(int(a), int(b)) for a, b in d.get("mandatory", [])],
            sink_count=int(d.get("sink_count", 4)),
            model=d.get("model", ""),
            params=d.get("params", {}),
        )


@dataclass
class AttentionTrace:
    """Recorded attention weights, float32 at rest.

    ``weights[l, h, q, t]`` is the weight the query at absolute position
    ``T - Q + q`` assigns to key ``t``. Entries outside the causal
    support are exactly zero.
    """

    weights: np.ndarray
    mode: str = MODE_FULL
    meta: TraceMeta | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 4:
            raise TraceError(f"trace tensor must be 4-D, got shape {w.shape}")
        self.weights = w
        if self.mode not in (MODE_FULL, MODE_LAST_ROW):
            raise TraceError(f"unknown trace mode {self.mode!r}")

    @property
    def L(self) -> int:
        return self.weights.shape[0]

    @property
    def H(self) -> int:
        return self.weights.shape[1]

    @property
    def Q(self) -> int:
        return self.weights.shape[2]

    @property
    def T(self) -> int:
        return self.weights.shape[3]

    def query_position(self, q: int) -> int:
        """Absolute sequence position of query row ``q``."""
        return self.T - self.Q + q

    def last_row(self) -> np.ndarray:
        """(L, H, T) attention of the final query position, as float64."""
        return self.weights[:, :, -1, :].astype(np.float64)

    def query_window(self, window: int) -> np.ndarray:
        """(L, H, w, T) attention of the last ``window`` query rows, float64."""
        if window < 1 or window > self.Q:
            raise TraceError(
                f"requested a {window}-row query window but trace has Q={self.Q}"
            )
        return self.weights[:, :, self.Q - window:, :].astype(np.float64)


@dataclass
class TraceCheck:
    name: str
    passed: bool
    hard: bool = True
    detail: str = ""


@dataclass
class TraceReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.passed or not c.hard for c in self.checks)

    @property
    def hard_failures(self) -> list:
        return [c for c in self.checks if not c.passed and c.hard]

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [asdict(c) for c in self.checks],
        }


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def write_trace(trace: AttentionTrace, path) -> None:
    """Serialize ``trace`` to ``path`` plus a ``.meta.json`` sidecar."""
    path = Path(path)
    w = np.ascontiguousarray(trace.weights, dtype="<f4")
    header = MAGIC + struct.pack("<5I", VERSION, trace.L, trace.H, trace.Q, trace.T)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(w.tobytes())
    meta = trace.meta if trace.meta is not None else TraceMeta()
    _meta_path(path).write_text(meta.to_json(), encoding="utf-8")


def read_trace(path, max_elements: int = MAX_ELEMENTS) -> AttentionTrace:
    """Read and validate a KVTR file; loads the sidecar when present."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 24:
        raise FormatError(
            f"{path}: file too short for a KVTR header ({len(raw)} bytes, need 24)"
        )
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, L, H, Q, T = struct.unpack("<5I", raw[4:24])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported KVTR version {version}")
    n_elem = L * H * Q * T
    if min(L, H, Q, T) < 1 or n_elem > max_elements:
        raise FormatError(
            f"{path}: implausible dimensions L={L} H={H} Q={Q} T={T}"
        )
    expected = 24 + 4 * n_elem
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {L}x{H}x{Q}x{T}, got {len(raw)}"
        )
    weights = np.frombuffer(raw[24:], dtype="<f4").reshape(L, H, Q, T)
    mode = MODE_FULL if Q == T else MODE_LAST_ROW if Q == 1 else MODE_FULL

    meta = None
    mp = _meta_path(path)
    if mp.exists():
        meta = TraceMeta.from_json(mp.read_text(encoding="utf-8"))

    trace = AttentionTrace(weights=weights, mode=mode, meta=meta)
    _check_row_sums(trace, source=str(path))
    return trace


def _check_row_sums(trace: AttentionTrace, source: str = "trace") -> None:
    sums = trace.weights.astype(np.float64).sum(axis=3)
    err = np.abs(sums - 1.0)
    worst = float(err.max())
    if worst > ROW_SUM_HARD_TOL:
        l, h, q = np.unravel_index(int(err.argmax()), err.shape)
        raise TraceError(
            f"{source}: attention row (l={l}, h={h}, q={q}) sums to "
            f"{sums[l, h, q]:.6f}, outside the hard {ROW_SUM_HARD_TOL} tolerance"
        )
    if worst > ROW_SUM_TOL:
        warnings.warn(
            f"{source}: worst attention row-sum deviation {worst:.2e} exceeds "
            f"{ROW_SUM_TOL} (tolerated up to {ROW_SUM_HARD_TOL})",
            RuntimeWarning,
            stacklevel=2,
        )


def validate_trace(trace: AttentionTrace) -> TraceReport:
    """Run every trace invariant, returning a machine-readable report."""
    checks = []
    w = trace.weights.astype(np.float64)
    finite = bool(np.isfinite(w).all())
    checks.append(TraceCheck("finite", finite, detail="all weights finite"))

    nonneg = finite and bool((w >= 0.0).all() and (w <= 1.0).all())
    checks.append(TraceCheck("range", nonneg, detail="weights within [0, 1]"))

    sums = w.sum(axis=3)
    err = np.abs(sums - 1.0)
    worst = float(err.max()) if err.size else 0.0
    soft_ok = worst <= ROW_SUM_TOL
    hard_ok = worst <= ROW_SUM_HARD_TOL
    checks.append(
        TraceCheck(
            "row_sum_hard",
            hard_ok,
            detail=f"worst |row sum - 1| = {worst:.3e} (limit {ROW_SUM_HARD_TOL})",
        )
    )
    checks.append(
        TraceCheck(
            "row_sum",
            soft_ok,
            hard=False,
            detail=f"worst |row sum - 1| = {worst:.3e} (limit {ROW_SUM_TOL})",
        )
    )

    causal = True
    offender = ""
    for q in range(trace.Q):
        pos = trace.query_position(q)
        if pos + 1 < trace.T and np.any(w[:, :, q, pos + 1:] != 0.0):
            causal = False
            offender = f"query row {q} (position {pos}) has mass beyond its support"
            break
    checks.append(TraceCheck("causality", causal, detail=offender or "no acausal mass"))

    if trace.meta is not None:
        spans_ok = True
        detail = ""
        for name, spans in (("shots", trace.meta.shots), ("mandatory", trace.meta.mandatory)):
            for a, b in spans:
                if not (0 <= a < b <= trace.T):
                    spans_ok = False
                    detail = f"{name} span [{a}, {b}) outside [0, {trace.T})"
        checks.append(TraceCheck("meta_spans", spans_ok, detail=detail or "spans in range"))

    return TraceReport(checks=checks)
