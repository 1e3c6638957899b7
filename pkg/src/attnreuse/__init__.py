"""Decode-time attention reuse: summary algebra, query matching, and a decoder built on both."""

from .attention import (
    AttentionSummary,
    CancellationError,
    EmptySummaryError,
    MassExceededError,
    RopeTable,
    attend_full,
    avg_cos,
    empty_summary,
    finalize,
    merge,
    remove,
    rope_rotate,
    summarize,
)
from .engine import (
    ByteCostModel,
    DecodeEngine,
    DecodeMetrics,
    EngineConfig,
    StepResult,
    SummaryRing,
    aux_overhead_ratio,
    aux_overhead_rule_of_thumb,
    break_even_gate,
    compute_metrics,
    fidelity_efficiency,
    group_kv_span,
    mass_bound_check,
    oracle_outputs,
    run_decode,
)
from .kvstore import KvPage, KvStore, TrafficCounter
from .matching import (
    MATCH_POST_ROPE,
    MATCH_PRE_ROPE,
    MatchConfig,
    MatchResult,
    QueryRing,
    calibrate_tau,
    chi2_cdf,
    match_query,
    threshold,
)
from .sched import (
    Plan,
    WorkItem,
    baselines,
    gen_skewed_spans,
    naive_makespan,
    optimal_makespan,
    perfect_makespan,
    plan_lpt,
)
from .workload import (
    PRESETS,
    SyntheticSpec,
    Trace,
    TraceError,
    gen_synthetic,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionSummary",
    "ByteCostModel",
    "CancellationError",
    "DecodeEngine",
    "DecodeMetrics",
    "EmptySummaryError",
    "EngineConfig",
    "KvPage",
    "KvStore",
    "MATCH_POST_ROPE",
    "MATCH_PRE_ROPE",
    "MassExceededError",
    "MatchConfig",
    "MatchResult",
    "PRESETS",
    "Plan",
    "QueryRing",
    "RopeTable",
    "StepResult",
    "SummaryRing",
    "SyntheticSpec",
    "Trace",
    "TraceError",
    "TrafficCounter",
    "WorkItem",
    "attend_full",
    "aux_overhead_ratio",
    "aux_overhead_rule_of_thumb",
    "avg_cos",
    "baselines",
    "break_even_gate",
    "calibrate_tau",
    "chi2_cdf",
    "compute_metrics",
    "empty_summary",
    "fidelity_efficiency",
    "finalize",
    "gen_skewed_spans",
    "gen_synthetic",
    "group_kv_span",
    "mass_bound_check",
    "match_query",
    "merge",
    "naive_makespan",
    "optimal_makespan",
    "oracle_outputs",
    "perfect_makespan",
    "plan_lpt",
    "read_trace",
    "remove",
    "rope_rotate",
    "run_decode",
    "summarize",
    "threshold",
    "write_trace",
]
