"""Minseek Toolbox: sequential test-time scaling with a position-free KV cache."""

__version__ = "0.1.0"

from .model import (
    ModelConfig,
    Sentinels,
    SamplingConfig,
    Weights,
    PositionOverflowError,
    init_weights,
    apply_rope,
    attention_step,
    forward_step,
    forward_full,
    forward_from_rows,
    nucleus_distribution,
    sample,
    make_rng,
)

from .cache import (
    DualKVCache,
    LayerCache,
    Segment,
    SegmentKind,
    CacheBound,
    MinRuleOutcome,
    MinRuleDecision,
    CacheConsistencyError,
    SegmentError,
    BoundViolationError,
    select_retained,
)

from .segmenter import (
    BoundaryEvent,
    BoundaryKind,
    scan,
    scan_stream,
    split_transcript,
)

from .controller import (
    Method,
    Action,
    ScalingPolicy,
    ControllerState,
    Transcript,
    ScriptedSource,
    SampledSource,
    GenerationSession,
    ScriptExhaustedError,
    on_think_end,
    handle_missing_think_end,
    step_scripted,
    required_context,
    check_static_bound,
    run_generation,
)

from .trace import GenerationTrace, replay_phases

from .oracle import (
    OracleObserver,
    recompute_oracle,
    recompute_from_cache,
    logit_deviation,
    logits_close,
)

from .metrics import (
    get_all_metrics,
    get_all_complexity_metrics,
    get_all_normalized_metrics,
)

from .metrics_complexity import (
    CostRecord,
    fit_complexity,
    per_cycle_cost,
    cumulative_at_cycle,
    memory_probe,
)

from .metrics_normalized import NormalizedMetric, normalize

from .config import (
    RunConfig,
    ConfigError,
    load_run_config,
    load_model_config,
    load_script,
)

from .data import (
    synthetic_prompt,
    synthetic_thought_lengths,
    synthetic_script,
    constant_script,
)

from .viz import (
    plot_cumulative_cost,
    plot_normalized_time,
    write_plot_data,
    read_plot_data,
    save_figure,
)
