import numpy as np
import pytest
from hypothesis import given, strategies as st

from kvlab import (
    Budget,
    BudgetError,
    KVCacheSet,
    RetainedSet,
    RetentionError,
    apply_retention,
    budget_tokens,
    cache_report,
)
from kvlab.cache import SCOPE_GLOBAL, SEGMENT_DECODING, SEGMENT_PREFILL


def make_cache(rng, layers=2, heads=2, head_dim=4, prefill=6, decoding=4):
    n = prefill + decoding
    keys = [rng.normal(size=(heads, n, head_dim)) for _ in range(layers)]
    values = [rng.normal(size=(heads, n, head_dim)) for _ in range(layers)]
    positions = [np.tile(np.arange(n), (heads, 1)) for _ in range(layers)]
    return KVCacheSet(keys, values, positions, prefill_len=prefill, seq_len=n)


def test_budget_tokens_examples():
    assert budget_tokens(1.0, 137) == 137
    assert budget_tokens(0.5, 7, min_keep=1) == 3
    assert budget_tokens(0.1, 5, min_keep=1) == 1


def test_budget_tokens_errors():
    with pytest.raises(BudgetError):
        budget_tokens(0.0, 10)
    with pytest.raises(BudgetError):
        budget_tokens(1.5, 10)
    with pytest.raises(BudgetError):
        Budget()
    with pytest.raises(BudgetError):
        Budget(ratio=2.0)


@given(
    r=st.floats(min_value=0.01, max_value=1.0, allow_nan=False),
    n=st.integers(min_value=0, max_value=10_000),
    min_keep=st.integers(min_value=0, max_value=8),
)
def test_budget_tokens_properties(r, n, min_keep):
    m = budget_tokens(r, n, min_keep)
    assert 0 <= m <= n
    if n >= min_keep:
        assert m >= min(min_keep, n)
    if r == 1.0:
        assert m == n
    assert m <= max(int(np.floor(r * n)), min_keep)


def test_apply_retention_identity():
    rng = np.random.default_rng(0)
    cache = make_cache(rng)
    out = apply_retention(cache, RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, np.arange(6)))
    for l in range(cache.layers):
        assert (out.keys[l] == cache.keys[l]).all()
        assert (out.positions[l] == cache.positions[l]).all()


def test_apply_retention_singleton():
    rng = np.random.default_rng(1)
    cache = make_cache(rng, prefill=5, decoding=0)
    out = apply_retention(cache, RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, [0]))
    assert out.entry_count(0) == 1
    assert out.positions[0][0][0] == 0


def test_apply_retention_naive_copy_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        prefill = int(rng.integers(1, 10))
        decoding = int(rng.integers(0, 6))
        cache = make_cache(rng, prefill=prefill, decoding=decoding)
        keep = np.sort(rng.choice(prefill, size=int(rng.integers(1, prefill + 1)),
                                  replace=False))
        out = apply_retention(cache, RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, keep))
        for l in range(cache.layers):
            for h in range(cache.heads):
                # naive per-index copy: surviving prefill rows plus the whole
                # decoding segment in original order
                want_pos = [p for p in range(prefill) if p in set(keep.tolist())]
                want_pos += list(range(prefill, prefill + decoding))
                assert out.positions[l][h].tolist() == want_pos
                for row, p in enumerate(want_pos):
                    src = cache.positions[l][h].tolist().index(p)
                    assert (out.keys[l][h][row] == cache.keys[l][h][src]).all()
                    assert (out.values[l][h][row] == cache.values[l][h][src]).all()


def test_apply_retention_idempotent():
    rng = np.random.default_rng(3)
    cache = make_cache(rng)
    rs = RetainedSet(SEGMENT_DECODING, SCOPE_GLOBAL, [6, 8])
    once = apply_retention(cache, rs)
    twice = apply_retention(once, rs)
    for l in range(cache.layers):
        assert (once.keys[l] == twice.keys[l]).all()
        assert (once.positions[l] == twice.positions[l]).all()


def test_apply_retention_other_segment_untouched():
    rng = np.random.default_rng(4)
    cache = make_cache(rng, prefill=6, decoding=4)
    out = apply_retention(cache, RetainedSet(SEGMENT_DECODING, SCOPE_GLOBAL, [7, 9]))
    for l in range(cache.layers):
        assert (out.keys[l][:, :6] == cache.keys[l][:, :6]).all()
    assert out.segment_count(SEGMENT_PREFILL) == 6
    assert out.segment_count(SEGMENT_DECODING) == 2


def test_apply_retention_out_of_range():
    rng = np.random.default_rng(5)
    cache = make_cache(rng, prefill=6, decoding=2)
    with pytest.raises(RetentionError):
        apply_retention(cache, RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, [0, 6]))
    with pytest.raises(RetentionError):
        apply_retention(cache, RetainedSet(SEGMENT_DECODING, SCOPE_GLOBAL, [5]))


def test_apply_retention_evicted_index_cannot_return():
    rng = np.random.default_rng(6)
    cache = make_cache(rng, prefill=6, decoding=0)
    out = apply_retention(cache, RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, [1, 3]))
    with pytest.raises(RetentionError):
        apply_retention(out, RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, [1, 2, 3]))


def test_retained_set_validation():
    with pytest.raises(RetentionError):
        RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, [3, 1])
    with pytest.raises(RetentionError):
        RetainedSet(SEGMENT_PREFILL, SCOPE_GLOBAL, [1, 1])
    with pytest.raises(RetentionError):
        RetainedSet("nope", SCOPE_GLOBAL, [1])


def test_cache_report_empty():
    cache = KVCacheSet.empty(2, 2, 8)
    assert cache_report(cache) == {
        "prefill_tokens": 0, "decoding_tokens": 0, "bytes_estimate": 0,
    }


def test_cache_report_arithmetic():
    rng = np.random.default_rng(7)
    cache = make_cache(rng, layers=2, heads=2, head_dim=8, prefill=10, decoding=0)
    report = cache_report(cache)
    assert report["bytes_estimate"] == 10 * 2 * 2 * 8 * 2 * 4
    assert report["prefill_tokens"] == 10


def test_cache_report_halves_after_decoding_eviction():
    rng = np.random.default_rng(8)
    cache = make_cache(rng, layers=2, heads=2, head_dim=8, prefill=4, decoding=8)
    per_token = 2 * 2 * 8 * 2 * 4
    before = cache_report(cache)
    out = apply_retention(cache, RetainedSet(SEGMENT_DECODING, SCOPE_GLOBAL, [4, 6, 8, 10]))
    after = cache_report(out)
    dec_before = before["bytes_estimate"] - before["prefill_tokens"] * per_token
    dec_after = after["bytes_estimate"] - after["prefill_tokens"] * per_token
    assert dec_after * 2 == dec_before
