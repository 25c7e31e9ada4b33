"""kvlab: a desk-scale laboratory for KV-cache eviction policies.

A deterministic byte-level toy transformer with an explicit, evictable
key/value cache; six pluggable eviction policies behind one estimator
interface; attention-distribution analytics; a KVTR trace interchange
format; and a ratio-sweep experiment harness with a CLI.
"""

from .analysis import (
    CoverageCurve,
    aggregate_attention,
    coverage_at,
    cumulative_distribution,
    heatmap_export,
    write_coverage_csv,
)
from .cache import (
    Budget,
    KVCacheSet,
    RetainedSet,
    apply_retention,
    budget_tokens,
    cache_report,
)
from .errors import (
    BudgetError,
    ConfigurationError,
    DegenerateCurveError,
    FormatError,
    KVLabError,
    LengthError,
    RetentionError,
    SegmentationError,
    SelectionError,
    TraceError,
    ValidationError,
    ZeroBaselineError,
)
from .harness import (
    ExperimentConfig,
    ResultRow,
    bench_policies,
    delta_p,
    demo_config,
    divergence,
    plot_sweep,
    ratio_sweep,
)
from .model import (
    GenerationResult,
    Model,
    ModelConfig,
    TokenSequence,
    decode_step,
    detokenize,
    detokenize_bytes,
    generate,
    init_model,
    prefill,
    tokenize,
)
from .policies import (
    ChunkKV,
    FullKV,
    H2O,
    POLICY_KINDS,
    Policy,
    PyramidKV,
    ScoreVector,
    ShotKV,
    ShotSegmentation,
    SnapKV,
    StreamingLLM,
    chunkkv,
    h2o,
    policy_from_config,
    pyramidkv,
    run_policy,
    score_decoding_tokens,
    score_prefill_shots,
    select_shots,
    shotkv_decode_evict,
    shotkv_prefill,
    snapkv,
    streaming_llm,
    topk,
)
from .traceio import (
    AttentionTrace,
    TraceMeta,
    TraceReport,
    read_trace,
    validate_trace,
    write_trace,
)

__version__ = "0.1.0"
