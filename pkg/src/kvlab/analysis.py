"""Attention-pattern analytics: coverage curves and heatmap export.

The coverage curve answers "what fraction of total attention mass do the
top p fraction of tokens hold?" after optionally dropping the first few
(sink) tokens. Aggregation across layers, heads and query rows is a plain
sum; sorting is scale invariant, so sum and mean give the same curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DegenerateCurveError, TraceError
from .traceio import MODE_FULL, AttentionTrace

CURVE_SAMPLES = 1000


def aggregate_attention(trace: AttentionTrace) -> np.ndarray:
    """Total attention received per key, summed over layers, heads and
    query rows (causal zeros included). Needs a full trace."""
    if trace.mode != MODE_FULL:
        raise TraceError("aggregate_attention needs a full trace (all query rows)")
    return trace.weights.astype(np.float64).sum(axis=(0, 1, 2))


@dataclass
class CoverageCurve:
    """Piecewise-linear cumulative attention-mass curve.

    ``fractions[i]`` is the token fraction (0..1), ``masses[i]`` the share
    of total remaining mass held by that top fraction of tokens, both
    monotone with exact (0, 0) and (1, 1) endpoints.
    """

    fractions: np.ndarray
    masses: np.ndarray
    exclude_first_n: int = 0
    source: str = ""

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)

    @property
    def points(self):
        return list(zip(self.fractions.tolist(), self.masses.tolist()))


def cumulative_distribution(scores, exclude_first_n: int = 0,
                            source: str = "") -> CoverageCurve:
    """Sort the non-excluded scores descending and accumulate their mass.

    Breakpoint i (1-based) is (i/m, mass of the i highest-scored tokens /
    total mass), with m the number of tokens after exclusion.
    """
    s = np.asarray(scores, dtype=np.float64)
    if exclude_first_n < 0:
        raise ConfigurationError(f"exclude_first_n {exclude_first_n} must be >= 0")
    if s.ndim != 1 or s.size <= exclude_first_n:
        raise ConfigurationError(
            f"need more than {exclude_first_n} scores, got shape {s.shape}"
        )
    rem = np.sort(s[exclude_first_n:])[::-1]
    total = rem.sum()
    if total <= 0.0:
        raise DegenerateCurveError("remaining attention mass is zero")
    m = rem.size
    fractions = np.concatenate([[0.0], np.arange(1, m + 1) / m])
    masses = np.concatenate([[0.0], np.cumsum(rem) / total])
    fractions[-1] = 1.0
    masses[-1] = 1.0
    masses = np.minimum.accumulate(masses[::-1])[::-1]   # guard float wobble
    return CoverageCurve(fractions, masses, exclude_first_n=exclude_first_n,
                         source=source)


def coverage_at(curve: CoverageCurve, p: float) -> float:
    """Mass fraction held by the top ``p`` fraction of tokens (linear
    interpolation between breakpoints)."""
    if not (0.0 <= p <= 1.0):
        raise ConfigurationError(f"token fraction {p} outside [0, 1]")
    return float(np.interp(p, curve.fractions, curve.masses))


def write_coverage_csv(curve: CoverageCurve, path) -> None:
    """Emit ``p,mass`` rows at 1000 evenly spaced fractions plus the exact
    breakpoints, 9 significant digits."""
    grid = np.arange(CURVE_SAMPLES + 1) / CURVE_SAMPLES
    ps = np.unique(np.concatenate([grid, curve.fractions]))
    lines = ["p,mass"]
    for p in ps:
        lines.append(f"{p:.9g},{coverage_at(curve, float(p)):.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def heatmap_export(trace: AttentionTrace, layer: int, head, path) -> None:
    """Write one attention matrix as a binary PGM (P5) image.

    Row = query, column = key, pixel = round(255 * weight / row max);
    ``head`` is an index or "mean" for the across-head average. Bytes are
    deterministic for a given trace.
    """
    if not (0 <= layer < trace.L):
        raise ConfigurationError(f"layer {layer} outside 0..{trace.L - 1}")
    w = trace.weights.astype(np.float64)
    if head == "mean":
        mat = w[layer].mean(axis=0)
    else:
        head = int(head)
        if not (0 <= head < trace.H):
            raise ConfigurationError(f"head {head} outside 0..{trace.H - 1}")
        mat = w[layer, head]
    row_max = mat.max(axis=1, keepdims=True)
    row_max[row_max == 0.0] = 1.0
    img = np.rint(255.0 * mat / row_max).astype(np.uint8)
    header = f"P5\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
