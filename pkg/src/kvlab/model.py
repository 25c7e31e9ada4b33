"""Deterministic toy transformer with an explicit, evictable KV cache.

Byte-level tokenizer, seeded Gaussian weights (std 0.02), pre-norm blocks
with rotary position embeddings and a 4x feed-forward, no biases, greedy
argmax sampling. The model is untrained on purpose: the lab measures how
faithfully a compressed cache reproduces the uncompressed run (logit
divergence), not task accuracy.

Weight draw order, from a single ``numpy.random.default_rng(seed)``
stream (all ``normal(0, 0.02)`` float64, norm gains fixed at 1):

    embedding (vocab, D), then per layer wq, wk, wv, wo (D, D),
    w1 (D, 4D), w2 (4D, D), and finally the unembedding (D, vocab)

where D = heads * head_dim. Equal configs therefore give bit-identical
weights.

Rotary embeddings are applied at original absolute positions and keys are
cached post-rotation, so evicting a token never re-rotates survivors and
identity compression reproduces the uncompressed logits bit for bit.

A built ``Model`` is immutable and safe to share across workers; a
``KVCacheSet`` and a generation loop belong to one sequence at a time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cache import (
    KVCacheSet,
    SEGMENT_DECODING,
    apply_retention,
    budget_tokens,
)
from .errors import ConfigurationError, LengthError
from .traceio import MODE_FULL, MODE_LAST_ROW, AttentionTrace, TraceMeta

_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    head_dim: int
    vocab_size: int = 256
    max_seq: int = 512
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.head_dim < 1:
            raise ConfigurationError(
                f"layers/heads/head_dim must be >= 1, got "
                f"{self.layers}/{self.heads}/{self.head_dim}"
            )
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size {self.vocab_size} must be >= 2")
        if self.max_seq < 1:
            raise ConfigurationError(f"max_seq {self.max_seq} must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ConfigurationError("seed must fit in 64 unsigned bits")
        if self.rope_base <= 0:
            raise ConfigurationError(f"rope_base {self.rope_base} must be positive")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    def describe(self) -> str:
        return (
            f"tinyformer(L={self.layers},H={self.heads},d={self.head_dim},"
            f"vocab={self.vocab_size},seed={self.seed})"
        )


@dataclass
class TokenSequence:
    ids: list
    text_origin: str | None = None

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text) -> TokenSequence:
    """Byte-level tokenization: one token per byte, ids 0..255."""
    if isinstance(text, bytes):
        return TokenSequence(ids=list(text), text_origin=None)
    data = text.encode("utf-8")
    return TokenSequence(ids=list(data), text_origin=text)


def detokenize_bytes(ids) -> bytes:
    return bytes(int(i) for i in ids)


def detokenize(ids) -> str:
    return detokenize_bytes(ids).decode("utf-8")


@dataclass
class BlockWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray
    blocks: list
    unembed: np.ndarray


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    D = config.dim
    embed = rng.normal(0.0, 0.02, (config.vocab_size, D))
    blocks = []
    for _ in range(config.layers):
        blocks.append(
            BlockWeights(
                wq=rng.normal(0.0, 0.02, (D, D)),
                wk=rng.normal(0.0, 0.02, (D, D)),
                wv=rng.normal(0.0, 0.02, (D, D)),
                wo=rng.normal(0.0, 0.02, (D, D)),
                w1=rng.normal(0.0, 0.02, (D, 4 * D)),
                w2=rng.normal(0.0, 0.02, (4 * D, D)),
            )
        )
    unembed = rng.normal(0.0, 0.02, (D, config.vocab_size))
    return Model(config=config, embed=embed, blocks=blocks, unembed=unembed)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _NORM_EPS)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate the even-sized prefix of each head vector; odd tail passes through.

    x: (n, H, head_dim), positions: (n,) absolute indices.
    """
    dh = x.shape[-1]
    half = dh // 2
    if half == 0:
        return x
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    x1 = x[..., :half]
    x2 = x[..., half:2 * half]
    out = np.concatenate(
        [x1 * cos - x2 * sin, x1 * sin + x2 * cos, x[..., 2 * half:]], axis=-1
    )
    return out


def _check_ids(ids, vocab_size: int) -> None:
    for i in ids:
        if not (0 <= int(i) < vocab_size):
            raise ConfigurationError(f"token id {i} outside vocab of size {vocab_size}")


def prefill(model: Model, tokens: TokenSequence, *, full_trace: bool = True):
    """Run the prompt through the model in one causal pass.

    Returns ``(cache, trace, logits)`` where ``logits`` is the next-token
    distribution at the final prompt position and the trace carries either
    every query row (full mode) or only the final one.
    """
    cfg = model.config
    ids = list(tokens.ids) if isinstance(tokens, TokenSequence) else list(tokens)
    n = len(ids)
    if n < 1:
        raise LengthError("prompt must contain at least one token")
    if n > cfg.max_seq:
        raise LengthError(f"prompt length {n} exceeds max_seq {cfg.max_seq}")
    _check_ids(ids, cfg.vocab_size)

    H, d = cfg.heads, cfg.head_dim
    positions = np.arange(n)
    x = model.embed[np.asarray(ids, dtype=np.int64)]
    att_all = np.zeros((cfg.layers, H, n, n))
    causal_bias = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), -np.inf, 0.0)

    keys, values = [], []
    for block in model.blocks:
        h = _rmsnorm(x)
        q = (h @ block.wq).reshape(n, H, d)
        k = (h @ block.wk).reshape(n, H, d)
        v = (h @ block.wv).reshape(n, H, d)
        q = _rope(q, positions, cfg.rope_base)
        k = _rope(k, positions, cfg.rope_base)
        scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(d)
        scores = scores + causal_bias[None, :, :]
        scores -= scores.max(axis=2, keepdims=True)
        expd = np.exp(scores)
        att = expd / expd.sum(axis=2, keepdims=True)
        att_all[len(keys)] = att
        ctx = np.einsum("hqk,khd->qhd", att, v).reshape(n, H * d)
        x = x + ctx @ block.wo
        x = x + _silu(_rmsnorm(x) @ block.w1) @ block.w2
        keys.append(np.ascontiguousarray(k.transpose(1, 0, 2)))
        values.append(np.ascontiguousarray(v.transpose(1, 0, 2)))

    logits = _rmsnorm(x[-1]) @ model.unembed
    pos_grid = [np.tile(positions, (H, 1)) for _ in range(cfg.layers)]
    cache = KVCacheSet(keys, values, pos_grid, prefill_len=n, seq_len=n)

    weights = att_all if full_trace else att_all[:, :, -1:, :]
    trace = AttentionTrace(
        weights=weights.astype(np.float32),
        mode=MODE_FULL if full_trace else MODE_LAST_ROW,
        meta=TraceMeta(tokens=[int(i) for i in ids], model=cfg.describe()),
    )
    return cache, trace, logits


def decode_step(model: Model, cache: KVCacheSet, last_token: int):
    """Advance generation by one token.

    Appends exactly one KV pair per layer at the next absolute position,
    attends over the retained entries only (evicted tokens are invisible),
    and returns ``(logits, step_attention)`` where ``step_attention`` is a
    per-layer list of (H, cached_entries) rows. Mutates ``cache``.
    """
    cfg = model.config
    if cache.seq_len < 1:
        raise LengthError("decode_step requires a non-empty cache (run prefill first)")
    if cache.seq_len >= cfg.max_seq:
        raise LengthError(f"sequence would exceed max_seq {cfg.max_seq}")
    _check_ids([last_token], cfg.vocab_size)

    H, d = cfg.heads, cfg.head_dim
    pos = cache.seq_len
    pos_arr = np.asarray([pos])
    x = model.embed[int(last_token)]

    step_attention = []
    for l, block in enumerate(model.blocks):
        h = _rmsnorm(x)
        q = (h @ block.wq).reshape(1, H, d)
        k = (h @ block.wk).reshape(1, H, d)
        v = (h @ block.wv).reshape(H, d)
        q = _rope(q, pos_arr, cfg.rope_base)[0]
        k = _rope(k, pos_arr, cfg.rope_base)[0]
        cache.append(l, k, v, pos)
        K, V = cache.keys[l], cache.values[l]
        scores = np.einsum("hd,htd->ht", q, K) / np.sqrt(d)
        scores -= scores.max(axis=1, keepdims=True)
        expd = np.exp(scores)
        att = expd / expd.sum(axis=1, keepdims=True)
        step_attention.append(att)
        ctx = np.einsum("ht,htd->hd", att, V).reshape(H * d)
        x = x + ctx @ block.wo
        x = x + _silu(_rmsnorm(x) @ block.w1) @ block.w2

    cache.seq_len = pos + 1
    logits = _rmsnorm(x) @ model.unembed
    return logits, step_attention


@dataclass
class GenerationResult:
    prompt_len: int
    generated_ids: list
    per_step_logits: np.ndarray
    cache_sizes_per_step: list
    trace: AttentionTrace
    prefill_retained: tuple
    decoding_positions_per_step: list = field(default_factory=list)
    selection_ms: float = 0.0
    cache: KVCacheSet | None = None


def generate(model: Model, prompt: TokenSequence, max_new: int, policy, seg=None,
             on_step=None) -> GenerationResult:
    """Greedy generation with a pluggable cache-compression policy.

    The prompt cache is compressed exactly once, before the first decode
    step, and that retained set stays fixed for the whole run. Policies
    with a decoding budget additionally evict from the decoding segment
    after any step that leaves it over budget. ``on_step(cache, step)``
    is an instrumentation hook for tests and reports.
    """
    from .policies import run_policy, score_decoding_tokens, shotkv_decode_evict

    if seg is not None:
        seg.validate(len(prompt))

    cache, trace, logits = prefill(model, prompt, full_trace=True)
    if seg is not None and trace.meta is not None:
        trace.meta.shots = [list(s) for s in seg.shots]
        trace.meta.mandatory = [list(m) for m in seg.mandatory]

    t0 = time.perf_counter()
    retained = run_policy(policy, trace, seg)
    selection_ms = (time.perf_counter() - t0) * 1e3
    cache = apply_retention(cache, retained)
    prefill_retained = tuple(int(p) for p in cache.segment_positions(segment="prefill"))

    r_d = getattr(policy, "decoding_ratio", None)
    min_keep = getattr(policy, "min_keep", 1)
    accumulate = bool(getattr(policy, "accumulate", False))
    acc_scores: dict[int, float] = {}

    generated, per_step, sizes, dec_hist = [], [], [], []
    last_logits = logits
    for step in range(1, max_new + 1):
        token = int(np.argmax(last_logits))
        last_logits, step_att = decode_step(model, cache, token)
        generated.append(token)
        per_step.append(last_logits)

        if r_d is not None:
            dec_budget = budget_tokens(r_d, step, min_keep)
            dec_mask = cache.segment_mask(0, 0, SEGMENT_DECODING)
            if int(dec_mask.sum()) > dec_budget:
                dec_positions = cache.positions[0][0][dec_mask]
                stacked = np.stack([att[:, dec_mask] for att in step_att])
                t0 = time.perf_counter()
                scores = score_decoding_tokens(stacked)
                if accumulate:
                    vals = scores.scores
                    for p, s in zip(dec_positions, vals):
                        acc_scores[int(p)] = acc_scores.get(int(p), 0.0) + float(s)
                    vals = np.asarray([acc_scores[int(p)] for p in dec_positions])
                    scores.scores = vals
                evict = shotkv_decode_evict(
                    scores, r_d, positions=dec_positions,
                    total_generated=step, min_keep=min_keep,
                )
                selection_ms += (time.perf_counter() - t0) * 1e3
                cache = apply_retention(cache, evict)
                if accumulate:
                    kept = set(int(i) for i in evict.indices)
                    acc_scores = {p: s for p, s in acc_scores.items() if p in kept}

        sizes.append(cache.entry_count(0))
        dec_hist.append(tuple(int(p) for p in cache.segment_positions()))
        if on_step is not None:
            on_step(cache, step)

    return GenerationResult(
        prompt_len=len(prompt),
        generated_ids=generated,
        per_step_logits=np.asarray(per_step),
        cache_sizes_per_step=sizes,
        trace=trace,
        prefill_retained=prefill_retained,
        decoding_positions_per_step=dec_hist,
        selection_ms=selection_ms,
        cache=cache,
    )
