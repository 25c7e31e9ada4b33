"""Acceptance suite: one test per release criterion, at the stated
tolerance, printing one PASS line each (run with -s or -rA to see them)."""

import hashlib
import struct
import time

import numpy as np
import pytest

from kvlab import (
    AttentionTrace,
    FormatError,
    FullKV,
    ModelConfig,
    ShotKV,
    ShotSegmentation,
    aggregate_attention,
    coverage_at,
    cumulative_distribution,
    delta_p,
    divergence,
    generate,
    init_model,
    read_trace,
    run_policy,
    select_shots,
    shotkv_prefill,
    tokenize,
    topk,
    write_trace,
)
from kvlab.cache import budget_tokens
from kvlab.harness import demo_config, demo_prompt, plot_sweep, ratio_sweep
from kvlab.policies import ChunkKV, H2O, PyramidKV, SnapKV, StreamingLLM
from kvlab.traceio import MODE_LAST_ROW

from conftest import make_random_trace
from test_policies import select_shots_oracle, topk_oracle

EVICTION_POLICIES = [
    StreamingLLM(sink_count=4),
    H2O(recent_count=4),
    SnapKV(obs_window=8, pool_kernel=3),
    PyramidKV(obs_window=8, pool_kernel=3, pyramid_min_ratio=0.25),
    ChunkKV(chunk_size=8, obs_window=8),
    ShotKV(),
]


def _at_ratio(policy, ratio):
    if policy.kind == "FullKV":
        return policy
    if policy.kind == "ShotKV":
        return policy.clone(r_p=ratio, r_d=ratio)
    return policy.clone(ratio=ratio)


def test_identity_suite():
    """All 6 policies at ratio 1.0: zero divergence from FullKV, < 60 s."""
    t0 = time.perf_counter()
    model = init_model(ModelConfig(layers=2, heads=2, head_dim=16, max_seq=256, seed=7))
    text, seg = demo_prompt()
    prompt = tokenize(text)
    assert len(prompt) == 64
    base = generate(model, prompt, 32, FullKV(), seg)
    for policy in EVICTION_POLICIES:
        res = generate(model, prompt, 32, _at_ratio(policy, 1.0), seg)
        m = divergence(base.per_step_logits, res.per_step_logits)
        assert m["kl"] == 0.0, policy.kind
        assert m["top1_match"] == 1.0, policy.kind
        assert m["max_abs"] <= 1e-6, policy.kind
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(f"ACCEPTANCE PASS: identity suite (6 policies, ratio 1.0, {elapsed:.2f}s)")


def test_topk_oracle_1000():
    """1000 random score vectors with ties: exact match with full-sort oracle."""
    rng = np.random.default_rng(1001)
    for i in range(1000):
        n = int(rng.integers(1, 257))
        if i % 2 == 0:
            scores = rng.choice([0.0, 0.5, 1.0, 1.5, 2.0], size=n)   # deliberate ties
        else:
            scores = rng.random(n)
        k = int(rng.integers(0, n + 1))
        assert topk(scores, k).tolist() == topk_oracle(scores.tolist(), k)
    print("ACCEPTANCE PASS: top-k oracle (1000 vectors, recency tie rule)")


def test_shot_selection_oracle_500():
    """500 random instances: greedy oracle equality, budget bound, prefix
    property across nested budgets."""
    rng = np.random.default_rng(1002)
    for _ in range(500):
        k = int(rng.integers(1, 11))
        scores = np.round(rng.random(k), rng.integers(1, 4))
        lengths = rng.integers(1, 20, size=k)
        mandatory = int(rng.integers(0, 6))
        total = int(lengths.sum()) + mandatory
        b_small = int(rng.integers(mandatory, total + 2))
        b_large = int(rng.integers(b_small, total + 4))
        small = select_shots(scores, lengths, b_small, mandatory)
        large = select_shots(scores, lengths, b_large, mandatory)
        assert small == select_shots_oracle(scores.tolist(), lengths.tolist(),
                                            b_small, mandatory)
        assert large == select_shots_oracle(scores.tolist(), lengths.tolist(),
                                            b_large, mandatory)
        assert sum(int(lengths[i]) for i in small) <= b_small - mandatory
        assert sum(int(lengths[i]) for i in large) <= b_large - mandatory
        assert set(small) <= set(large)
    print("ACCEPTANCE PASS: shot-selection oracle (500 instances, nested budgets)")


def test_shot_wholeness_and_delta_p():
    """500 ShotKV prefill runs with zero partial shots; printed-percentage
    deltas reproduced to 1e-4."""
    rng = np.random.default_rng(1003)
    partial = 0
    for _ in range(500):
        n = int(rng.integers(6, 48))
        n_cuts = int(rng.integers(1, min(8, n)))
        cuts = sorted(rng.choice(np.arange(1, n), size=n_cuts, replace=False).tolist())
        bounds = [0] + cuts + [n]
        shots = list(zip(bounds, bounds[1:]))
        seg = ShotSegmentation(shots=shots)       # no mandatory cost: all shots
        trace = make_random_trace(rng, L=2, H=2, T=n)
        r_p = float(rng.uniform(0.05, 1.0))
        rs = shotkv_prefill(trace, seg, r_p)
        kept = set(rs.indices.tolist())
        assert len(kept) <= budget_tokens(r_p, n)
        for a, b in shots:
            inside = kept & set(range(a, b))
            if inside and inside != set(range(a, b)):
                partial += 1
    assert partial == 0
    assert delta_p(47.33, 46.00) == pytest.approx(0.0289, abs=1e-4)
    assert delta_p(0.5143, 0.7945) == pytest.approx(-0.3527, abs=1e-4)
    print("ACCEPTANCE PASS: shot wholeness (500 runs) and printed delta-p values")


def test_decoding_budget_replay():
    """ShotKV at r_d in {0.25, 0.5, 0.75}, 64 steps: budget bound per step,
    frozen prefill cache, no evicted index returns."""
    model = init_model(ModelConfig(layers=2, heads=2, head_dim=16, max_seq=256, seed=7))
    text, seg = demo_prompt()
    prompt = tokenize(text)
    for r_d in (0.25, 0.5, 0.75):
        prefill_digests = []

        def snapshot(cache, step):
            blob = b"".join(
                cache.keys[l][:, cache.segment_mask(l, 0, "prefill"), :].tobytes()
                for l in range(cache.layers)
            ) + b"".join(
                cache.segment_positions(l, 0, "prefill").tobytes()
                for l in range(cache.layers)
            )
            prefill_digests.append(hashlib.sha256(blob).hexdigest())

        res = generate(model, prompt, 64, ShotKV(r_p=0.5, r_d=r_d), seg,
                       on_step=snapshot)
        assert len(set(prefill_digests)) == 1

        prefill_kept = len(res.prefill_retained)
        seen_gone = set()
        prev = set()
        for step, (size, dec) in enumerate(
                zip(res.cache_sizes_per_step, res.decoding_positions_per_step), 1):
            dec = set(dec)
            assert size - prefill_kept == len(dec)
            assert len(dec) <= max(int(np.floor(r_d * step)), 1)
            assert not (dec & seen_gone), "an evicted index reappeared"
            seen_gone |= prev - dec
            prev = dec
    print("ACCEPTANCE PASS: decoding budget replay (r_d 0.25/0.5/0.75, 64 steps)")


def test_scale_invariance_100_traces():
    """Multiplying trace weights by 0.5 or 3.0 changes no retained set."""
    rng = np.random.default_rng(1004)
    policies = [FullKV()] + [_at_ratio(p, 0.5) for p in EVICTION_POLICIES]
    for _ in range(100):
        n = int(rng.integers(16, 33))
        trace = make_random_trace(rng, L=2, H=2, T=n)
        mid = n // 2
        seg = ShotSegmentation(shots=[(2, mid), (mid, n - 2)],
                               mandatory=[(0, 2), (n - 2, n)])
        for c in (0.5, 3.0):
            scaled = AttentionTrace(weights=trace.weights * np.float32(c),
                                    mode=trace.mode)
            for policy in policies:
                a = run_policy(policy, trace, seg)
                b = run_policy(policy, scaled, seg)
                assert a.scope == b.scope
                for l in range(trace.L):
                    for h in range(trace.H):
                        assert a.for_unit(l, h).tolist() == b.for_unit(l, h).tolist()
    print("ACCEPTANCE PASS: scale invariance (100 traces, c in {0.5, 3.0})")


def test_analysis_suite():
    """Uniform curve is the diagonal to 1e-9; exact endpoints; aggregate
    total equals L*H*Q to 1e-4."""
    curve = cumulative_distribution(np.full(40, 2.5))
    for p in np.linspace(0.0, 1.0, 11):
        assert abs(coverage_at(curve, float(p)) - p) <= 1e-9
    assert curve.fractions[0] == 0.0 and curve.masses[0] == 0.0
    assert curve.fractions[-1] == 1.0 and curve.masses[-1] == 1.0
    assert coverage_at(curve, 0.0) == 0.0 and coverage_at(curve, 1.0) == 1.0

    rng = np.random.default_rng(1005)
    for _ in range(10):
        trace = make_random_trace(rng, L=int(rng.integers(1, 4)),
                                  H=int(rng.integers(1, 4)),
                                  T=int(rng.integers(2, 40)))
        total = aggregate_attention(trace).sum()
        assert abs(total - trace.L * trace.H * trace.Q) <= 1e-4
    print("ACCEPTANCE PASS: analysis suite (uniform curve, endpoints, totals)")


def test_format_suite(tmp_path):
    """KVTR round-trip bit-equality on 100 traces, 28-byte minimum,
    corrupted-magic and truncation rejections."""
    rng = np.random.default_rng(1006)
    for i in range(100):
        trace = make_random_trace(rng, mode="full" if i % 3 else "last-row")
        p = tmp_path / f"t{i}.kvtr"
        write_trace(trace, p)
        back = read_trace(p)
        assert back.weights.tobytes() == trace.weights.tobytes()
        assert back.weights.shape == trace.weights.shape

    minimal = tmp_path / "min.kvtr"
    write_trace(AttentionTrace(weights=np.ones((1, 1, 1, 1), dtype=np.float32),
                               mode=MODE_LAST_ROW), minimal)
    assert minimal.stat().st_size == 28

    bad = tmp_path / "bad.kvtr"
    bad.write_bytes(b"XXXX" + struct.pack("<5I", 1, 1, 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_trace(bad)
    trunc = tmp_path / "trunc.kvtr"
    trunc.write_bytes(minimal.read_bytes()[:-2])
    with pytest.raises(FormatError):
        read_trace(trunc)
    print("ACCEPTANCE PASS: format suite (100 round trips, 28-byte min, rejections)")


def test_sweep_determinism(tmp_path):
    """Demo-config sweep twice: byte-identical CSV (wall column excluded)
    and byte-identical SVG."""
    csv_a, csv_b = tmp_path / "a.csv", tmp_path / "b.csv"
    ratio_sweep(demo_config(), csv_a)
    ratio_sweep(demo_config(), csv_b)

    def strip_wall(path):
        lines = path.read_text().splitlines()
        return "\n".join(",".join(line.split(",")[:-1]) for line in lines)

    assert strip_wall(csv_a) == strip_wall(csv_b)

    svg_a, svg_b = tmp_path / "a.svg", tmp_path / "b.svg"
    plot_sweep(csv_a, svg_a)
    plot_sweep(csv_b, svg_b)
    assert svg_a.read_bytes() == svg_b.read_bytes()
    print("ACCEPTANCE PASS: sweep determinism (CSV sans wall clock, SVG bytes)")


def test_sweep_budget_invariants(tmp_path):
    """The 6-policy x 9-ratio sweep on a 64-token prompt completes and every
    row satisfies the budget arithmetic."""
    rows = ratio_sweep(demo_config(), tmp_path / "s.csv")
    assert len(rows) == 6 * 9
    n = 64
    for row in rows:
        budget = budget_tokens(row.ratio, n)
        if row.policy == "ShotKV":
            assert row.retained_prefill <= budget
            assert row.retained_decoding <= max(np.floor(row.r_d * 32), 1)
        else:
            assert row.retained_prefill == budget
            assert row.retained_decoding == 32
        assert row.kl >= 0.0 and 0.0 <= row.top1_match <= 1.0
    print("ACCEPTANCE PASS: full sweep budget invariants (54 rows)")
