"""Experiment orchestration: ratio sweeps, divergence vs FullKV, relative
performance deltas, policy-overhead microbenchmarks and SVG plotting.

Accuracy scores are injected from external ``label,value`` CSV files
rather than computed here; the toy model measures compression fidelity
(logit divergence against the uncompressed run), which is the desk-scale
proxy for accuracy degradation.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import budget_tokens
from .errors import ConfigurationError, ZeroBaselineError
from .model import ModelConfig, TokenSequence, generate, init_model, tokenize
from .policies import POLICY_KINDS, Policy, ShotSegmentation, policy_from_config

SWEEP_COLUMNS = [
    "policy", "ratio", "r_p", "r_d", "kl", "top1_match", "max_abs",
    "retained_prefill", "retained_decoding", "wall_ms",
]
DEFAULT_RATIOS = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def delta_p(p_c: float, p_base: float) -> float:
    """Relative performance change of a compressed run against baseline:
    (p_c - p_base) / p_base."""
    if p_base == 0:
        raise ZeroBaselineError("baseline performance is zero; delta undefined")
    return (p_c - p_base) / p_base


def divergence(logits_full: np.ndarray, logits_compressed: np.ndarray) -> dict:
    """Per-step divergence between two logit matrices.

    kl: mean over steps of KL(softmax(full) || softmax(compressed));
    top1_match: fraction of steps with the same argmax; max_abs: largest
    absolute logit difference anywhere.
    """
    a = np.asarray(logits_full, dtype=np.float64)
    b = np.asarray(logits_compressed, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"logit shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[None, :], b[None, :]

    def log_softmax(x):
        shifted = x - x.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    la, lb = log_softmax(a), log_softmax(b)
    pa = np.exp(la)
    kl = float((pa * (la - lb)).sum(axis=1).mean())
    top1 = float((a.argmax(axis=1) == b.argmax(axis=1)).mean())
    max_abs = float(np.abs(a - b).max())
    return {"kl": kl, "top1_match": top1, "max_abs": max_abs}


@dataclass
class ResultRow:
    policy: str
    ratio: float
    r_p: float | None
    r_d: float | None
    kl: float
    top1_match: float
    max_abs: float
    retained_prefill: float
    retained_decoding: float
    wall_ms: float

    def as_csv(self) -> list:
        def num(v):
            return "" if v is None else f"{v:.9g}"
        return [
            self.policy, f"{self.ratio:.9g}", num(self.r_p), num(self.r_d),
            f"{self.kl:.9g}", f"{self.top1_match:.9g}", f"{self.max_abs:.9g}",
            f"{self.retained_prefill:.9g}", f"{self.retained_decoding:.9g}",
            f"{self.wall_ms:.3f}",
        ]


@dataclass
class ExperimentConfig:
    model: ModelConfig
    prompt: TokenSequence
    policies: list
    ratios: list = field(default_factory=lambda: list(DEFAULT_RATIOS))
    segmentation: ShotSegmentation | None = None
    max_new: int = 32
    out_dir: str = "."
    seed: int | None = None

    def __post_init__(self):
        if not self.policies:
            raise ConfigurationError("experiment needs at least one policy")
        for r in self.ratios:
            if not (0.0 < r <= 1.0):
                raise ConfigurationError(f"ratio {r} outside (0, 1]")
        self.policies = [
            p if isinstance(p, Policy) else policy_from_config(p) for p in self.policies
        ]

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        d = json.loads(text)
        model = ModelConfig(**d["model"])
        if "prompt_file" in d:
            prompt = tokenize(Path(d["prompt_file"]).read_text(encoding="utf-8"))
        else:
            prompt = tokenize(d["prompt"])
        seg = None
        if "segmentation" in d:
            s = d["segmentation"]
            seg = ShotSegmentation(
                shots=[tuple(x) for x in s.get("shots", [])],
                mandatory=[tuple(x) for x in s.get("mandatory", [])],
            )
        elif d.get("shot_marker"):
            seg = ShotSegmentation.from_marked_text(
                prompt.text_origin or "", d["shot_marker"]
            )
        return cls(
            model=model,
            prompt=prompt,
            policies=d["policies"],
            ratios=d.get("ratios", list(DEFAULT_RATIOS)),
            segmentation=seg,
            max_new=d.get("max_new", 32),
            out_dir=d.get("out_dir", "."),
            seed=d.get("seed"),
        )


def _with_ratio(policy: Policy, ratio: float) -> Policy:
    if policy.kind == "FullKV":
        return policy
    if policy.kind == "ShotKV":
        return policy.clone(r_p=ratio, r_d=ratio)
    return policy.clone(ratio=ratio)


def _mean_unit_count(cache, segment) -> float:
    counts = [cache.segment_count(segment, layer=l, head=0) for l in range(cache.layers)]
    return float(np.mean(counts))


def ratio_sweep(config: ExperimentConfig, out_path=None):
    """Run every configured (policy, ratio) cell against the FullKV
    baseline and emit one CSV row per cell.

    Rows are sorted by (policy kind, ratio descending) so output order is
    stable no matter how cells are scheduled; repeated runs of the same
    config produce byte-identical CSV apart from the wall_ms column.
    """
    from .policies import FullKV
    from .cache import SEGMENT_DECODING, SEGMENT_PREFILL

    model = init_model(config.model)
    base = generate(model, config.prompt, config.max_new, FullKV(), config.segmentation)

    rows = []
    for policy in config.policies:
        for ratio in config.ratios:
            p = _with_ratio(policy, ratio)
            result = generate(model, config.prompt, config.max_new, p, config.segmentation)
            metrics = divergence(base.per_step_logits, result.per_step_logits)
            cache = result.cache
            rows.append(ResultRow(
                policy=p.kind,
                ratio=ratio,
                r_p=getattr(p, "r_p", None),
                r_d=getattr(p, "r_d", None),
                kl=metrics["kl"],
                top1_match=metrics["top1_match"],
                max_abs=metrics["max_abs"],
                retained_prefill=_mean_unit_count(cache, SEGMENT_PREFILL),
                retained_decoding=_mean_unit_count(cache, SEGMENT_DECODING),
                wall_ms=result.selection_ms,
            ))
    rows.sort(key=lambda r: (r.policy, -r.ratio))

    if out_path is not None:
        out_path = Path(out_path)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_COLUMNS)
            for row in rows:
                writer.writerow(row.as_csv())
    return rows


@dataclass
class BenchRow:
    policy: str
    median_ms: float
    p95_ms: float
    tokens_per_s: float


def bench_policies(config: ExperimentConfig, repetitions: int = 100) -> list:
    """Microbenchmark of selection overhead per policy.

    Times ``run_policy`` on a fixed prefill trace (median and p95 over
    ``repetitions``) plus end-to-end generation throughput. Numbers are
    machine-dependent; only relative magnitudes are meaningful.
    """
    from .model import prefill
    from .policies import FullKV, run_policy

    if repetitions < 1:
        raise ConfigurationError("repetitions must be >= 1")
    model = init_model(config.model)
    _, trace, _ = prefill(model, config.prompt, full_trace=True)

    policies = list(config.policies)
    if not any(p.kind == "FullKV" for p in policies):
        policies.insert(0, FullKV())   # ~0-overhead baseline row

    report = []
    for policy in policies:
        p = _with_ratio(policy, config.ratios[0]) if config.ratios else policy
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            run_policy(p, trace, config.segmentation)
            times.append((time.perf_counter() - t0) * 1e3)
        t0 = time.perf_counter()
        result = generate(model, config.prompt, config.max_new, p, config.segmentation)
        gen_s = time.perf_counter() - t0
        report.append(BenchRow(
            policy=p.kind,
            median_ms=statistics.median(times),
            p95_ms=float(np.percentile(times, 95)),
            tokens_per_s=len(result.generated_ids) / gen_s if gen_s > 0 else float("inf"),
        ))
    return report


def format_bench_report(rows) -> str:
    lines = [f"{'policy':<14} {'median_ms':>10} {'p95_ms':>10} {'tokens_per_s':>13}"]
    for r in rows:
        lines.append(
            f"{r.policy:<14} {r.median_ms:>10.4f} {r.p95_ms:>10.4f} {r.tokens_per_s:>13.1f}"
        )
    return "\n".join(lines)


def read_scores_csv(path) -> dict:
    """Read a ``label,value`` CSV of externally computed accuracy scores."""
    scores = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or (i == 0 and row[0].strip().lower() == "label"):
                continue
            if len(row) < 2:
                raise ConfigurationError(f"{path}: malformed row {row!r}")
            scores[row[0].strip()] = float(row[1])
    if not scores:
        raise ConfigurationError(f"{path}: no scores found")
    return scores


def delta_p_table(scores: dict, baseline: str) -> list:
    """(label, value, delta vs baseline) rows; baseline row delta is 0."""
    if baseline not in scores:
        raise ConfigurationError(f"baseline label {baseline!r} not in scores")
    base = scores[baseline]
    return [(label, value, delta_p(value, base)) for label, value in scores.items()]


def plot_sweep(csv_path, out_path, metric: str = "kl") -> None:
    """Render a sweep CSV as a deterministic text SVG line chart.

    One polyline per policy, x axis = ratio descending (aggressive
    compression to the right), y axis = the chosen metric.
    """
    csv_path = Path(csv_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or metric not in reader.fieldnames:
            raise ConfigurationError(
                f"{csv_path}: no {metric!r} column (have {reader.fieldnames})"
            )
        data = list(reader)
    if not data:
        raise ConfigurationError(f"{csv_path}: no data rows to plot")

    series: dict[str, list] = {}
    for row in data:
        series.setdefault(row["policy"], []).append(
            (float(row["ratio"]), float(row[metric]))
        )
    for pts in series.values():
        pts.sort(key=lambda t: -t[0])

    width, height = 640, 420
    left, right, top, bottom = 70, 620, 30, 370
    ratios = [r for pts in series.values() for r, _ in pts]
    vals = [v for pts in series.values() for _, v in pts]
    r_min, r_max = min(ratios), max(ratios)
    v_max = max(vals) if max(vals) > 0 else 1.0

    def x_of(r):
        if r_max == r_min:
            return (left + right) / 2
        return left + (r_max - r) / (r_max - r_min) * (right - left)

    def y_of(v):
        return bottom - v / v_max * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{(left + right) // 2}" y="{height - 8}" text-anchor="middle" '
        f'font-size="13">compression ratio (descending)</text>',
        f'<text x="16" y="{(top + bottom) // 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {(top + bottom) // 2})">{metric}</text>',
    ]
    for r in sorted({round(r, 6) for r in ratios}, reverse=True):
        parts.append(
            f'<text x="{x_of(r):.1f}" y="{bottom + 16}" text-anchor="middle" '
            f'font-size="11">{r:.3g}</text>'
        )
    for frac in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{left - 6}" y="{y_of(frac * v_max):.1f}" text-anchor="end" '
            f'font-size="11">{frac * v_max:.3g}</text>'
        )
    for i, name in enumerate(sorted(series)):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{x_of(r):.2f},{y_of(v):.2f}" for r, v in series[name])
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{right - 120}" y="{top + 16 + 16 * i}" font-size="12" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def demo_config(out_dir: str = ".") -> ExperimentConfig:
    """The bundled desk-scale sweep: 64-byte four-shot prompt, 2-layer
    model, all six eviction policies over the default ratio grid."""
    text, seg = demo_prompt()
    policies = [
        {"kind": "StreamingLLM", "sink_count": 4},
        {"kind": "H2O", "recent_count": 4},
        {"kind": "SnapKV", "obs_window": 8, "pool_kernel": 3},
        {"kind": "PyramidKV", "obs_window": 8, "pool_kernel": 3, "pyramid_min_ratio": 0.25},
        {"kind": "ChunkKV", "chunk_size": 8, "obs_window": 8},
        {"kind": "ShotKV"},
    ]
    return ExperimentConfig(
        model=ModelConfig(layers=2, heads=2, head_dim=16, max_seq=256, seed=7),
        prompt=tokenize(text),
        policies=policies,
        ratios=list(DEFAULT_RATIOS),
        segmentation=seg,
        max_new=32,
        out_dir=out_dir,
        seed=7,
    )


def demo_prompt():
    """A 64-byte few-shot arithmetic prompt with tiny mandatory spans so
    even a 10% budget can cover them."""
    prefix = "Q:\n"                      # 3 bytes, mandatory
    shots = [
        "12+2=14; 3+3=6\n",             # 15 bytes
        "3+5=8; 12+6=18\n",             # 15 bytes
        "4+4=8; 7+1=8;\n",              # 14 bytes
        "9+0=9; 6+3=9;\n",              # 14 bytes
    ]
    suffix = "A:\n"                      # 3 bytes, mandatory
    text = prefix + "".join(shots) + suffix
    data = text.encode("utf-8")
    assert len(data) == 64, len(data)
    spans = []
    cursor = len(prefix)
    for s in shots:
        spans.append((cursor, cursor + len(s)))
        cursor += len(s)
    seg = ShotSegmentation(shots=spans, mandatory=[(0, len(prefix)), (cursor, len(data))])
    return text, seg
