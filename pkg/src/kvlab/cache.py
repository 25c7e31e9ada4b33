"""KV-cache data model: per-layer key/value stores with original positions.

Entries are stored per layer as ``(H, T_l, head_dim)`` arrays so eviction
can differ per head (retained counts must stay equal across the heads of
a layer, which keeps storage rectangular). Positions are the original
absolute sequence indices; they survive eviction unchanged, which is what
lets rotary embeddings stay valid without re-rotating surviving keys.

The cache is split at ``prefill_len``: entries at positions below it form
the prefill segment, the rest the decoding segment. Eviction is permanent;
an entry's key/value vectors no longer exist once dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, RetentionError

SCOPE_GLOBAL = "global"
SCOPE_PER_LAYER = "per-layer"
SCOPE_PER_HEAD = "per-layer-per-head"

SEGMENT_PREFILL = "prefill"
SEGMENT_DECODING = "decoding"


@dataclass
class Budget:
    """Compression budget: a single ratio or a (prefill, decoding) split.

    Ratios live in (0, 1]; ``min_keep`` floors every integer budget so a
    segment never empties entirely.
    """

    ratio: float | None = None
    r_p: float | None = None
    r_d: float | None = None
    sink_count: int = 4
    min_keep: int = 1

    def __post_init__(self):
        if self.ratio is None and self.r_p is None and self.r_d is None:
            raise BudgetError("budget needs a ratio or an (r_p, r_d) split")
        for name in ("ratio", "r_p", "r_d"):
            v = getattr(self, name)
            if v is not None and not (0.0 < v <= 1.0):
                raise BudgetError(f"{name}={v} outside (0, 1]")
        if self.min_keep < 0:
            raise BudgetError(f"min_keep={self.min_keep} must be >= 0")


def budget_tokens(r: float, n: int, min_keep: int = 1) -> int:
    """Number of tokens a ratio-``r`` budget allows out of ``n``.

    floor(r*n), clamped to [min_keep, n]; exactly n when r == 1.
    """
    if not (0.0 < r <= 1.0):
        raise BudgetError(f"ratio {r} outside (0, 1]")
    if n < 0:
        raise BudgetError(f"segment size {n} negative")
    return min(n, max(min_keep, math.floor(r * n)))


@dataclass
class RetainedSet:
    """Indices (original positions) a policy keeps for one cache segment.

    ``indices`` depends on scope:
      global             -> one sorted int array
      per-layer          -> list of L sorted int arrays
      per-layer-per-head -> list of L lists of H sorted int arrays
    """

    segment: str
    scope: str
    indices: object

    def __post_init__(self):
        if self.segment not in (SEGMENT_PREFILL, SEGMENT_DECODING):
            raise RetentionError(f"unknown segment {self.segment!r}")
        if self.scope not in (SCOPE_GLOBAL, SCOPE_PER_LAYER, SCOPE_PER_HEAD):
            raise RetentionError(f"unknown scope {self.scope!r}")
        self.indices = self._normalize(self.indices)

    def _normalize(self, idx):
        def one(a):
            a = np.asarray(a, dtype=np.int64)
            if a.ndim != 1:
                raise RetentionError("index set must be one-dimensional")
            if a.size and (np.any(np.diff(a) <= 0) or np.any(a < 0)):
                raise RetentionError("indices must be sorted, unique and nonnegative")
            return a

        if self.scope == SCOPE_GLOBAL:
            return one(idx)
        if self.scope == SCOPE_PER_LAYER:
            return [one(a) for a in idx]
        return [[one(a) for a in layer] for layer in idx]

    def for_unit(self, layer: int, head: int) -> np.ndarray:
        if self.scope == SCOPE_GLOBAL:
            return self.indices
        if self.scope == SCOPE_PER_LAYER:
            return self.indices[layer]
        return self.indices[layer][head]

    def count_for_unit(self, layer: int, head: int) -> int:
        return int(self.for_unit(layer, head).size)


class KVCacheSet:
    """Mutable per-layer KV store for a single generated sequence.

    Not safe for concurrent mutation; hand off between workers only
    between operations.
    """

    def __init__(self, keys, values, positions, prefill_len: int, seq_len: int | None = None):
        self.keys = [np.asarray(k, dtype=np.float64) for k in keys]
        self.values = [np.asarray(v, dtype=np.float64) for v in values]
        self.positions = [np.asarray(p, dtype=np.int64) for p in positions]
        self.prefill_len = int(prefill_len)
        self.seq_len = int(seq_len) if seq_len is not None else int(prefill_len)
        self.check()

    # -- structure ---------------------------------------------------------

    @property
    def layers(self) -> int:
        return len(self.keys)

    @property
    def heads(self) -> int:
        return self.keys[0].shape[0] if self.keys else 0

    @property
    def head_dim(self) -> int:
        return self.keys[0].shape[2] if self.keys else 0

    def entry_count(self, layer: int = 0) -> int:
        return self.keys[layer].shape[1]

    def check(self) -> None:
        for l, (k, v, p) in enumerate(zip(self.keys, self.values, self.positions)):
            if k.shape != v.shape or k.shape[:2] != p.shape:
                raise RetentionError(
                    f"layer {l}: keys {k.shape}, values {v.shape}, positions {p.shape} disagree"
                )
            for h in range(p.shape[0]):
                row = p[h]
                pre = row[row < self.prefill_len]
                dec = row[row >= self.prefill_len]
                for seg_name, seg in (("prefill", pre), ("decoding", dec)):
                    if seg.size > 1 and np.any(np.diff(seg) <= 0):
                        raise RetentionError(
                            f"layer {l} head {h}: {seg_name} positions not strictly increasing"
                        )

    # -- segments ----------------------------------------------------------

    def segment_mask(self, layer: int, head: int, segment: str) -> np.ndarray:
        p = self.positions[layer][head]
        if segment == SEGMENT_PREFILL:
            return p < self.prefill_len
        return p >= self.prefill_len

    def segment_positions(self, layer: int = 0, head: int = 0, segment: str = SEGMENT_DECODING) -> np.ndarray:
        return self.positions[layer][head][self.segment_mask(layer, head, segment)]

    def segment_count(self, segment: str, layer: int = 0, head: int = 0) -> int:
        return int(self.segment_mask(layer, head, segment).sum())

    # -- mutation ----------------------------------------------------------

    def append(self, layer: int, k: np.ndarray, v: np.ndarray, position: int) -> None:
        """Append one token's (H, head_dim) key/value pair to ``layer``."""
        k = np.asarray(k, dtype=np.float64)[:, None, :]
        v = np.asarray(v, dtype=np.float64)[:, None, :]
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=1)
        self.values[layer] = np.concatenate([self.values[layer], v], axis=1)
        pos_col = np.full((self.positions[layer].shape[0], 1), position, dtype=np.int64)
        self.positions[layer] = np.concatenate([self.positions[layer], pos_col], axis=1)

    def copy(self) -> "KVCacheSet":
        return KVCacheSet(
            [k.copy() for k in self.keys],
            [v.copy() for v in self.values],
            [p.copy() for p in self.positions],
            self.prefill_len,
            self.seq_len,
        )

    @classmethod
    def empty(cls, layers: int, heads: int, head_dim: int) -> "KVCacheSet":
        z = [np.zeros((heads, 0, head_dim)) for _ in range(layers)]
        p = [np.zeros((heads, 0), dtype=np.int64) for _ in range(layers)]
        return cls(z, [a.copy() for a in z], p, prefill_len=0, seq_len=0)


def apply_retention(cache: KVCacheSet, retained: RetainedSet) -> KVCacheSet:
    """Drop every entry of ``retained.segment`` not listed in ``retained``.

    Pure: returns a new cache. Survivors keep their original positions and
    bit-exact key/value contents; the other segment is untouched. Applying
    the same set twice is a no-op the second time.
    """
    lo, hi = ((0, cache.prefill_len) if retained.segment == SEGMENT_PREFILL
              else (cache.prefill_len, cache.seq_len))
    new_keys, new_values, new_positions = [], [], []
    for l in range(cache.layers):
        keep_k, keep_v, keep_p = [], [], []
        ref_count = None
        for h in range(cache.heads):
            want = retained.for_unit(l, h)
            if want.size and (want[0] < lo or want[-1] >= hi):
                bad = want[want < lo] if want[0] < lo else want[want >= hi]
                raise RetentionError(
                    f"retained index {int(bad[0])} outside {retained.segment} "
                    f"range [{lo}, {hi})"
                )
            pos = cache.positions[l][h]
            in_segment = cache.segment_mask(l, h, retained.segment)
            keep = ~in_segment | np.isin(pos, want)
            missing = want[~np.isin(want, pos[in_segment])]
            if missing.size:
                raise RetentionError(
                    f"retained index {int(missing[0])} not present in layer {l} "
                    f"head {h} {retained.segment} segment (already evicted?)"
                )
            if ref_count is None:
                ref_count = int(keep.sum())
            elif int(keep.sum()) != ref_count:
                raise RetentionError(
                    f"layer {l}: retained counts differ across heads "
                    f"({ref_count} vs {int(keep.sum())}); storage must stay rectangular"
                )
            keep_k.append(cache.keys[l][h][keep])
            keep_v.append(cache.values[l][h][keep])
            keep_p.append(pos[keep])
        new_keys.append(np.stack(keep_k, axis=0))
        new_values.append(np.stack(keep_v, axis=0))
        new_positions.append(np.stack(keep_p, axis=0))
    return KVCacheSet(new_keys, new_values, new_positions, cache.prefill_len, cache.seq_len)


def cache_report(cache: KVCacheSet) -> dict:
    """Token counts per segment plus a bytes estimate.

    Bytes assume float32 storage: tokens * L * H * head_dim * 2 tensors *
    4 bytes, summed exactly per layer when counts differ across layers.
    Token counts are reported from layer 0 / head 0 (uniform everywhere
    except under per-layer budgets).
    """
    if cache.layers == 0 or cache.entry_count(0) == 0 and all(
        cache.entry_count(l) == 0 for l in range(cache.layers)
    ):
        return {"prefill_tokens": 0, "decoding_tokens": 0, "bytes_estimate": 0}
    h, d = cache.heads, cache.head_dim
    total = sum(cache.entry_count(l) * h * d * 2 * 4 for l in range(cache.layers))
    return {
        "prefill_tokens": cache.segment_count(SEGMENT_PREFILL),
        "decoding_tokens": cache.segment_count(SEGMENT_DECODING),
        "bytes_estimate": int(total),
    }
