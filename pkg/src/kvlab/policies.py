"""Token-importance scoring and retention selection.

Six eviction policies behind one estimator-style interface: ShotKV (shot
scoring on the prompt, budgeted whole-shot selection, per-step top-k over
decoded tokens) and five comparison policies (StreamingLLM, H2O, SnapKV,
PyramidKV, ChunkKV), plus the FullKV identity baseline.

Every policy is a class whose constructor stores its knobs verbatim
(sklearn convention), with ``get_params``/``set_params`` for cloning and
config dumps; the single selection entry point is
``select(trace, seg) -> RetainedSet``. All selection is pure and ordering
based, so multiplying a trace by any positive constant never changes a
retained set.

Tie rules, fixed for determinism: shots and chunks ranked by score break
ties toward the lower index when sorting shots (stable sort over the
original order) while token-level top-k breaks ties toward the higher,
i.e. more recent, index.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field

import numpy as np

from .cache import (
    RetainedSet,
    SCOPE_GLOBAL,
    SCOPE_PER_HEAD,
    SEGMENT_DECODING,
    SEGMENT_PREFILL,
    budget_tokens,
)
from .errors import (
    BudgetError,
    ConfigurationError,
    SegmentationError,
    SelectionError,
    TraceError,
)
from .traceio import MODE_FULL, AttentionTrace


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class ShotSegmentation:
    """Half-open token ranges for shots plus always-kept mandatory ranges.

    Tokens covered by neither list (connective text between ranges) are
    treated as mandatory: they are always retained and charged to the
    prefill budget before any shot is considered.
    """

    shots: list = field(default_factory=list)
    mandatory: list = field(default_factory=list)

    @property
    def n_shots(self) -> int:
        return len(self.shots)

    def shot_lengths(self) -> np.ndarray:
        return np.asarray([e - s for s, e in self.shots], dtype=np.int64)

    def validate(self, n: int) -> None:
        spans = [(int(a), int(b), "shot") for a, b in self.shots]
        spans += [(int(a), int(b), "mandatory") for a, b in self.mandatory]
        for a, b, kind in spans:
            if not (0 <= a < b <= n):
                raise SegmentationError(f"{kind} range [{a}, {b}) outside prompt of length {n}")
        ordered = sorted(spans)
        for (a1, b1, k1), (a2, b2, k2) in zip(ordered, ordered[1:]):
            if a2 < b1:
                raise SegmentationError(
                    f"{k1} range [{a1}, {b1}) overlaps {k2} range [{a2}, {b2})"
                )
        shot_sorted = [tuple(s) for s in self.shots]
        if shot_sorted != sorted(shot_sorted):
            raise SegmentationError("shot ranges must be sorted")

    def effective_mandatory(self, n: int) -> list:
        """Every token range not covered by a shot (explicit mandatory
        ranges are disjoint from shots, so this subsumes them)."""
        covered = sorted((int(a), int(b)) for a, b in self.shots)
        gaps = []
        cursor = 0
        for a, b in covered:
            if cursor < a:
                gaps.append((cursor, a))
            cursor = max(cursor, b)
        if cursor < n:
            gaps.append((cursor, n))
        return gaps

    def mandatory_cost(self, n: int) -> int:
        return sum(b - a for a, b in self.effective_mandatory(n))

    @classmethod
    def from_marked_text(cls, text: str, marker: str = "\n\n") -> "ShotSegmentation":
        """Derive spans by splitting byte-tokenized text on a marker.

        Each span includes its trailing marker. With three or more
        segments, the first (instruction prefix) and last (question
        suffix) are mandatory and the middle ones are shots; with two,
        only the last is mandatory; a single segment is one shot.
        """
        data = text.encode("utf-8")
        mark = marker.encode("utf-8")
        if not mark:
            raise SegmentationError("marker must be non-empty")
        spans = []
        start = 0
        while True:
            i = data.find(mark, start)
            if i < 0:
                if start < len(data):
                    spans.append((start, len(data)))
                break
            spans.append((start, i + len(mark)))
            start = i + len(mark)
        spans = [(a, b) for a, b in spans if b > a]
        if not spans:
            raise SegmentationError("prompt is empty")
        if len(spans) == 1:
            return cls(shots=spans, mandatory=[])
        if len(spans) == 2:
            return cls(shots=spans[:1], mandatory=spans[1:])
        return cls(shots=spans[1:-1], mandatory=[spans[0], spans[-1]])


def _ranges_to_indices(ranges) -> np.ndarray:
    if not ranges:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(a, b, dtype=np.int64) for a, b in ranges])


# ---------------------------------------------------------------------------
# score containers


@dataclass
class ScoreVector:
    """Per-token nonnegative importance scores for one cache segment."""

    segment: str
    scores: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1:
            raise TraceError(f"score vector must be 1-D, got shape {s.shape}")
        if s.size and float(s.min()) < 0.0:
            raise TraceError("attention-derived scores cannot be negative")
        self.scores = s

    def __len__(self) -> int:
        return len(self.scores)


# ---------------------------------------------------------------------------
# core selection primitives


def topk(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the higher (more recent)
    index, returned sorted ascending."""
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    n = s.size
    if k < 0 or k > n:
        raise SelectionError(f"cannot take top {k} of {n} scores")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(s, kind="stable")          # ascending score, ties ascending index
    chosen = order[::-1][:k]                      # descending score, ties descending index
    return np.sort(chosen).astype(np.int64)


def score_prefill_shots(trace: AttentionTrace, seg: ShotSegmentation,
                        query_rows="last") -> np.ndarray:
    """Length-normalized shot scores from the final prompt query row.

    Score(shot) = mean over the shot's tokens of the attention they
    receive from the designated query, summed over every layer and head.
    ``query_rows`` is either "last" (the row of the final prompt position,
    the default) or an integer window: the mean of that many trailing
    query rows, for SnapKV-style smoothing.
    """
    if query_rows == "last":
        row = trace.last_row()                    # (L, H, T)
    else:
        w = int(query_rows)
        if w < 1:
            raise TraceError(f"query window must be >= 1, got {w}")
        row = trace.query_window(w).mean(axis=2)
    per_token = row.sum(axis=(0, 1))              # (T,)
    scores = np.zeros(seg.n_shots, dtype=np.float64)
    for i, (a, b) in enumerate(seg.shots):
        if b > per_token.size:
            raise TraceError(f"shot range [{a}, {b}) beyond trace keys {per_token.size}")
        scores[i] = per_token[a:b].sum() / (b - a)
    return scores


def select_shots(shot_scores, shot_lengths, prefill_budget: int,
                 mandatory_cost: int) -> list:
    """Preserved shot ids under a token budget.

    Shots are ranked by score descending (ties to the lower shot index)
    and taken whole, in rank order, until the next-ranked shot no longer
    fits the remaining budget; selection stops there, so for fixed scores
    the preserved set at a smaller budget is always a subset of the
    preserved set at a larger one.
    """
    scores = np.asarray(shot_scores, dtype=np.float64)
    lengths = np.asarray(shot_lengths, dtype=np.int64)
    if scores.shape != lengths.shape:
        raise SegmentationError("shot scores and lengths disagree in length")
    if prefill_budget < mandatory_cost:
        raise BudgetError(
            f"prefill budget {prefill_budget} cannot cover mandatory tokens "
            f"({mandatory_cost})"
        )
    remaining = prefill_budget - mandatory_cost
    taken = []
    for i in np.argsort(-scores, kind="stable"):
        if lengths[i] > remaining:
            break
        taken.append(int(i))
        remaining -= int(lengths[i])
    return sorted(taken)


def shotkv_prefill(trace: AttentionTrace, seg: ShotSegmentation, r_p: float,
                   min_keep: int = 1, query_rows="last") -> RetainedSet:
    """One-shot prompt compression: mandatory ranges plus whole preserved shots.

    The result is computed once from the prefill trace and reused
    unchanged for the entire generation.
    """
    n = trace.T
    seg.validate(n)
    budget = budget_tokens(r_p, n, min_keep)
    mand = seg.effective_mandatory(n)
    chosen = select_shots(
        score_prefill_shots(trace, seg, query_rows=query_rows),
        seg.shot_lengths(),
        budget,
        sum(b - a for a, b in mand),
    )
    ranges = list(mand) + [tuple(seg.shots[i]) for i in chosen]
    idx = np.unique(_ranges_to_indices(ranges))
    return RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, idx)


def score_decoding_tokens(step_attention) -> ScoreVector:
    """Importance of each decoded token at the current step.

    Score(t) = attention the current query assigns to t, summed over all
    heads and layers; expects an (L, H, n_decoding) array.
    """
    a = np.asarray(step_attention, dtype=np.float64)
    if a.ndim != 3:
        raise TraceError(f"expected (layers, heads, keys) attention, got shape {a.shape}")
    return ScoreVector(
        segment=SEGMENT_DECODING,
        scores=a.sum(axis=(0, 1)),
        provenance="current-step query row summed over layers and heads",
    )


def shotkv_decode_evict(decoding_scores, r_d: float, *, positions=None,
                        total_generated=None, min_keep: int = 1) -> RetainedSet:
    """Top-k retention over the decoding segment.

    k = budget_tokens(r_d, total_generated): the budget grows with the
    number of tokens generated so far, not with the currently retained
    count (eviction is permanent, so the retained count alone would shrink
    the segment toward min_keep at any ratio below 1).
    """
    scores = np.asarray(getattr(decoding_scores, "scores", decoding_scores), dtype=np.float64)
    n = scores.size
    if n == 0:
        raise SelectionError("decoding segment is empty")
    if positions is None:
        positions = np.arange(n, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    total = int(total_generated) if total_generated is not None else n
    k = min(n, budget_tokens(r_d, total, min_keep))
    keep = topk(scores, k)
    return RetainedSet(SEGMENT_DECODING, SCOPE_GLOBAL, positions[keep])


# ---------------------------------------------------------------------------
# comparison policies (selection functions)


def identity_retention(n: int, segment: str = SEGMENT_PREFILL) -> RetainedSet:
    return RetainedSet(segment, SCOPE_GLOBAL, np.arange(n, dtype=np.int64))


def streaming_llm(n: int, sink_count: int, budget: int) -> RetainedSet:
    """Attention sinks plus the most recent window."""
    if sink_count < 0:
        raise ConfigurationError(f"sink_count {sink_count} must be >= 0")
    if budget >= n:
        return identity_retention(n)
    if budget < sink_count:
        raise BudgetError(f"budget {budget} smaller than sink_count {sink_count}")
    window = budget - sink_count
    idx = np.concatenate([
        np.arange(sink_count, dtype=np.int64),
        np.arange(n - window, n, dtype=np.int64),
    ])
    return RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, np.unique(idx))


def h2o(trace: AttentionTrace, budget: int, recent_count: int) -> RetainedSet:
    """Heavy hitters by cumulative received attention, plus a recency window.

    Per layer and head: key score = column sum of the full attention
    matrix (every query row); retain the top (budget - recent_count)
    non-recent keys plus the recent_count most recent ones.
    """
    n = trace.T
    if budget >= n:
        return identity_retention(n)
    if trace.mode != MODE_FULL:
        raise TraceError("H2O needs a full trace (all query rows)")
    if budget < recent_count:
        raise BudgetError(f"budget {budget} smaller than recent_count {recent_count}")
    colsums = trace.weights.astype(np.float64).sum(axis=2)   # (L, H, T)
    recent_start = n - recent_count
    recent = np.arange(recent_start, n, dtype=np.int64)
    nested = []
    for l in range(trace.L):
        per_head = []
        for h in range(trace.H):
            hh = topk(colsums[l, h, :recent_start], budget - recent_count)
            per_head.append(np.sort(np.concatenate([hh, recent])))
        nested.append(per_head)
    return RetainedSet(SEGMENT_PREFILL, SCOPE_PER_HEAD, nested)


def _maxpool1d(x: np.ndarray, kernel: int) -> np.ndarray:
    if kernel == 1 or x.size == 0:
        return x.copy()
    half = kernel // 2
    padded = np.pad(x, half, constant_values=-np.inf)
    return np.lib.stride_tricks.sliding_window_view(padded, kernel).max(axis=1)


def _window_selection(win_sums: np.ndarray, n: int, budget: int, w_eff: int,
                      pool_kernel: int) -> np.ndarray:
    """SnapKV-style pick for one scope unit: pooled prefix top-k + window."""
    prefix = _maxpool1d(win_sums[: n - w_eff], pool_kernel)
    keep_prefix = topk(prefix, budget - w_eff)
    return np.sort(np.concatenate([
        keep_prefix, np.arange(n - w_eff, n, dtype=np.int64),
    ]))


def snapkv(trace: AttentionTrace, budget: int, obs_window: int,
           pool_kernel: int) -> RetainedSet:
    """Observation-window scoring with max-pool smoothing, per layer and head.

    Prefix keys are scored by the attention they receive from the last
    ``obs_window`` query rows, max-pooled along the key axis (odd kernel,
    edge-clamped); the window itself is always kept. When the budget is
    smaller than the window, the kept window shrinks to the budget.
    """
    if pool_kernel < 1 or pool_kernel % 2 == 0:
        raise ConfigurationError(f"pool_kernel {pool_kernel} must be odd")
    if obs_window < 1:
        raise ConfigurationError(f"obs_window {obs_window} must be >= 1")
    n = trace.T
    if budget >= n:
        return identity_retention(n)
    if n <= obs_window:
        raise ConfigurationError(
            f"prompt length {n} must exceed obs_window {obs_window}"
        )
    w_eff = min(obs_window, budget)
    win = trace.query_window(w_eff).sum(axis=2)   # (L, H, T)
    nested = []
    for l in range(trace.L):
        per_head = []
        for h in range(trace.H):
            per_head.append(_window_selection(win[l, h], n, budget, w_eff, pool_kernel))
        nested.append(per_head)
    return RetainedSet(SEGMENT_PREFILL, SCOPE_PER_HEAD, nested)


def pyramid_layer_budgets(total_budget: int, layers: int, pyramid_min_ratio: float,
                          cap: int, min_keep: int = 1) -> list:
    """Linearly decaying per-layer budgets summing exactly to ``total_budget``.

    Ideal weights run from 1 at layer 0 down to ``pyramid_min_ratio`` at
    the last layer; integerized by largest remainder (ties to the lower
    layer) with per-layer quotas capped at ``cap`` and overflow
    redistributed down the pyramid.
    """
    if not (0.0 < pyramid_min_ratio <= 1.0):
        raise BudgetError(f"pyramid_min_ratio {pyramid_min_ratio} outside (0, 1]")
    if total_budget > layers * cap:
        raise BudgetError(f"total budget {total_budget} exceeds capacity {layers * cap}")
    if layers == 1:
        weights = np.ones(1)
    else:
        weights = 1.0 - (1.0 - pyramid_min_ratio) * np.arange(layers) / (layers - 1)

    budgets = np.zeros(layers, dtype=np.int64)
    active = list(range(layers))
    remaining = total_budget
    while True:
        wsum = sum(weights[i] for i in active)
        ideal = {i: remaining * weights[i] / wsum for i in active}
        over = [i for i in active if ideal[i] > cap]
        if not over:
            break
        for i in over:
            budgets[i] = cap
            remaining -= cap
            active.remove(i)
        if not active:
            break
    if active:
        floors = {i: int(np.floor(ideal[i])) for i in active}
        leftover = remaining - sum(floors.values())
        by_frac = sorted(active, key=lambda i: (-(ideal[i] - floors[i]), i))
        for i in active:
            budgets[i] = floors[i]
        for i in by_frac[:leftover]:
            budgets[i] += 1
    if budgets.min() < min_keep:
        raise BudgetError(
            f"pyramid apportionment gives a layer budget below min_keep "
            f"({int(budgets.min())} < {min_keep})"
        )
    return [int(b) for b in budgets]


def pyramidkv(trace: AttentionTrace, total_budget: int, pyramid_min_ratio: float,
              obs_window: int = 32, pool_kernel: int = 7,
              min_keep: int = 1) -> RetainedSet:
    """Layer-decaying budgets with SnapKV-style selection inside each layer."""
    if pool_kernel < 1 or pool_kernel % 2 == 0:
        raise ConfigurationError(f"pool_kernel {pool_kernel} must be odd")
    n, L = trace.T, trace.L
    if total_budget >= L * n:
        return identity_retention(n)
    budgets = pyramid_layer_budgets(total_budget, L, pyramid_min_ratio, cap=n,
                                    min_keep=min_keep)
    nested = []
    for l in range(L):
        b = budgets[l]
        per_head = []
        if b >= n:
            for h in range(trace.H):
                per_head.append(np.arange(n, dtype=np.int64))
        else:
            w_eff = min(obs_window, b)
            win = trace.query_window(w_eff).sum(axis=2)   # (L, H, T)
            for h in range(trace.H):
                per_head.append(_window_selection(win[l, h], n, b, w_eff, pool_kernel))
        nested.append(per_head)
    return RetainedSet(SEGMENT_PREFILL, SCOPE_PER_HEAD, nested)


def chunkkv(trace: AttentionTrace, budget: int, chunk_size: int,
            obs_window: int = 32) -> RetainedSet:
    """Whole-chunk retention by summed observation-window attention.

    The prompt is cut into consecutive fixed-size chunks (last may be
    short); chunks are taken whole in descending score order (ties to the
    more recent chunk, so chunk_size 1 degenerates to token top-k) and the
    first chunk that does not fit is trimmed by dropping its lowest-scored
    tokens, filling the budget exactly.
    """
    if chunk_size < 1:
        raise ConfigurationError(f"chunk_size {chunk_size} must be >= 1")
    n = trace.T
    if budget >= n:
        return identity_retention(n)
    w_eff = min(obs_window, trace.Q)
    token_scores = trace.query_window(w_eff).sum(axis=(0, 1, 2))   # (T,)
    bounds = [(a, min(a + chunk_size, n)) for a in range(0, n, chunk_size)]
    chunk_scores = np.asarray([token_scores[a:b].sum() for a, b in bounds])
    order = np.argsort(chunk_scores, kind="stable")[::-1]   # desc, ties -> higher index
    kept = []
    remaining = budget
    for ci in order:
        a, b = bounds[ci]
        if b - a <= remaining:
            kept.append(np.arange(a, b, dtype=np.int64))
            remaining -= b - a
        else:
            if remaining > 0:
                local = topk(token_scores[a:b], remaining)
                kept.append(a + local)
            remaining = 0
        if remaining == 0:
            break
    idx = np.sort(np.concatenate(kept)) if kept else np.zeros(0, dtype=np.int64)
    return RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, idx)


# ---------------------------------------------------------------------------
# estimator-style policy objects


class Policy:
    """Base class: sklearn-style parameter handling over ``select``.

    Subclasses store every constructor argument verbatim under the same
    attribute name; parameters are validated at selection time.
    """

    kind = "?"
    decoding_ratio = None
    min_keep = 1
    accumulate = False

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return sorted(p for p in sig.parameters if p != "self")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "Policy":
        valid = self._param_names()
        for name, value in params.items():
            if name not in valid:
                raise ConfigurationError(
                    f"unknown parameter {name!r} for policy {self.kind}"
                )
            setattr(self, name, value)
        return self

    def clone(self, **overrides) -> "Policy":
        params = self.get_params()
        params.update(overrides)
        return type(self)(**params)

    def as_config(self) -> dict:
        return {"kind": self.kind, **self.get_params()}

    def select(self, trace: AttentionTrace, seg: ShotSegmentation | None = None) -> RetainedSet:
        raise NotImplementedError

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


class FullKV(Policy):
    """Identity baseline: nothing is ever evicted."""

    kind = "FullKV"

    def __init__(self):
        pass

    def select(self, trace, seg=None):
        return identity_retention(trace.T)


class StreamingLLM(Policy):
    kind = "StreamingLLM"

    def __init__(self, ratio: float = 0.5, sink_count: int = 4, min_keep: int = 1):
        self.ratio = ratio
        self.sink_count = sink_count
        self.min_keep = min_keep

    def select(self, trace, seg=None):
        budget = budget_tokens(self.ratio, trace.T, self.min_keep)
        return streaming_llm(trace.T, self.sink_count, budget)


class H2O(Policy):
    kind = "H2O"

    def __init__(self, ratio: float = 0.5, recent_count: int = 32, min_keep: int = 1):
        self.ratio = ratio
        self.recent_count = recent_count
        self.min_keep = min_keep

    def select(self, trace, seg=None):
        budget = budget_tokens(self.ratio, trace.T, self.min_keep)
        return h2o(trace, budget, self.recent_count)


class SnapKV(Policy):
    kind = "SnapKV"

    def __init__(self, ratio: float = 0.5, obs_window: int = 32,
                 pool_kernel: int = 7, min_keep: int = 1):
        self.ratio = ratio
        self.obs_window = obs_window
        self.pool_kernel = pool_kernel
        self.min_keep = min_keep

    def select(self, trace, seg=None):
        budget = budget_tokens(self.ratio, trace.T, self.min_keep)
        return snapkv(trace, budget, self.obs_window, self.pool_kernel)


class PyramidKV(Policy):
    kind = "PyramidKV"

    def __init__(self, ratio: float = 0.5, obs_window: int = 32, pool_kernel: int = 7,
                 pyramid_min_ratio: float = 0.2, min_keep: int = 1):
        self.ratio = ratio
        self.obs_window = obs_window
        self.pool_kernel = pool_kernel
        self.pyramid_min_ratio = pyramid_min_ratio
        self.min_keep = min_keep

    def select(self, trace, seg=None):
        total = trace.L * budget_tokens(self.ratio, trace.T, self.min_keep)
        return pyramidkv(trace, total, self.pyramid_min_ratio,
                         obs_window=self.obs_window, pool_kernel=self.pool_kernel,
                         min_keep=self.min_keep)


class ChunkKV(Policy):
    kind = "ChunkKV"

    def __init__(self, ratio: float = 0.5, chunk_size: int = 10,
                 obs_window: int = 32, min_keep: int = 1):
        self.ratio = ratio
        self.chunk_size = chunk_size
        self.obs_window = obs_window
        self.min_keep = min_keep

    def select(self, trace, seg=None):
        budget = budget_tokens(self.ratio, trace.T, self.min_keep)
        return chunkkv(trace, budget, self.chunk_size, obs_window=self.obs_window)


class ShotKV(Policy):
    """Separated prefill/decoding compression with whole-shot retention.

    ``query_rows`` picks the prompt query used for shot scoring: "last"
    (the final prompt position) or an integer window of trailing rows.
    ``accumulate`` switches decoding scores from the current step's row to
    a running sum over steps; off by default.
    """

    kind = "ShotKV"

    def __init__(self, r_p: float = 0.5, r_d: float = 0.5, min_keep: int = 1,
                 query_rows="last", accumulate: bool = False):
        self.r_p = r_p
        self.r_d = r_d
        self.min_keep = min_keep
        self.query_rows = query_rows
        self.accumulate = accumulate

    @property
    def decoding_ratio(self):
        return self.r_d

    def select(self, trace, seg=None):
        if seg is None:
            raise SegmentationError("ShotKV requires a shot segmentation")
        return shotkv_prefill(trace, seg, self.r_p, min_keep=self.min_keep,
                              query_rows=self.query_rows)


POLICY_KINDS = {
    cls.kind: cls
    for cls in (FullKV, StreamingLLM, H2O, SnapKV, PyramidKV, ChunkKV, ShotKV)
}


def policy_from_config(config: dict) -> Policy:
    """Build a policy from a {"kind": ..., params...} mapping."""
    if "kind" not in config:
        raise ConfigurationError("policy config needs a 'kind' key")
    kind = config["kind"]
    if kind not in POLICY_KINDS:
        raise ConfigurationError(
            f"unknown policy kind {kind!r}; expected one of {sorted(POLICY_KINDS)}"
        )
    cls = POLICY_KINDS[kind]
    params = {k: v for k, v in config.items() if k != "kind"}
    valid = cls._param_names()
    for name in params:
        if name not in valid:
            raise ConfigurationError(f"unknown parameter {name!r} for policy {kind}")
    return cls(**params)


def run_policy(policy, trace: AttentionTrace, seg: ShotSegmentation | None = None) -> RetainedSet:
    """Uniform dispatch: prefill retention for any policy or config dict."""
    if isinstance(policy, dict):
        policy = policy_from_config(policy)
    if not isinstance(policy, Policy):
        raise ConfigurationError(f"not a policy: {policy!r}")
    return policy.select(trace, seg)
