"""
Tests for the full-recompute oracle and the incremental path it checks.
"""

import pytest
import torch

from minseek_toolbox.cache import ORIGINAL, DualKVCache
from minseek_toolbox.controller import (
    FAULT_SKIP_REMATERIALIZE,
    GenerationSession,
    Method,
    SampledSource,
    ScalingPolicy,
    ScriptedSource,
)
from minseek_toolbox.data import synthetic_script
from minseek_toolbox.model import (
    ModelConfig,
    SamplingConfig,
    forward_full,
    forward_step,
    init_weights,
    make_rng,
)
from minseek_toolbox.oracle import (
    OracleObserver,
    logit_deviation,
    logits_close,
    recompute_from_cache,
    recompute_oracle,
)

PROMPT = [5, 6, 7, 8]
THOUGHTS = [(6, True), (5, True), (3, True), (4, True), (2, True), (7, True)]
GROWING = [(6, True), (3, True), (5, True), (7, True)]


@pytest.fixture(scope="module")
def supply_weights():
    return init_weights(ModelConfig(), seed=0)


def _validate(weights, policy, source, fault=None):
    observer = OracleObserver()
    session = GenerationSession(
        weights, policy, source, checked=True, observer=observer, fault=fault
    )
    session.run(PROMPT)
    return observer, session


def test_recompute_oracle_last_row(supply_weights):
    tokens = [3, 1, 4, 1, 5]
    full = forward_full(supply_weights, tokens, list(range(5)))
    assert torch.equal(recompute_oracle(tokens, supply_weights), full[-1])
    shifted = recompute_oracle(tokens, supply_weights, [0, 1, 2, 7, 9])
    assert not logits_close(shifted, full[-1])


def test_logit_deviation_units():
    expected = torch.tensor([1.0, 0.0, -2.0])
    assert logit_deviation(expected, expected) == 0.0
    near = expected + torch.tensor([1e-5, 5e-7, 0.0])
    assert logit_deviation(near, expected) < 1.0
    far = expected + torch.tensor([0.0, 0.0, 1e-2])
    assert logit_deviation(far, expected) > 1.0


@pytest.mark.parametrize(
    "method, variant",
    [(Method.MINSEEK, 2), (Method.MINSEEK, 1), (Method.BUDGET, 2)],
)
def test_oracle_agrees_at_every_boundary(supply_weights, method, variant):
    """Test incremental logits against recomputation after every injection."""
    policy = ScalingPolicy(method=method, variant=variant, max_rc=4, segment_cap=16)
    observer, session = _validate(supply_weights, policy, ScriptedSource(THOUGHTS))
    assert observer.passed, observer.first_failure
    assert len(observer.boundaries) == len(session.transcript.injections) + 1
    assert observer.max_deviation <= 1.0


def test_oracle_agrees_in_original_position_mode(supply_weights):
    policy = ScalingPolicy(max_rc=4, segment_cap=16, position_mode=ORIGINAL)
    observer, session = _validate(supply_weights, policy, ScriptedSource(THOUGHTS))
    assert observer.passed
    assert session.max_position_id > session.max_rows - 1


def test_oracle_agrees_over_random_cycles(supply_weights):
    """Test 24 Min-Seek cycles of random length in [4, 32] under u = 32."""
    policy = ScalingPolicy(max_rc=24, segment_cap=32)
    source = synthetic_script(24, low=4, high=32, first_thought=16, seed=4)
    observer, session = _validate(supply_weights, policy, source)
    assert session.trace.terminal["rc_count"] == 24
    assert len(observer.boundaries) == 25
    assert observer.passed, observer.first_failure
    assert session.max_rows <= 3 * 32


def test_oracle_agrees_over_100_cycles(supply_weights):
    policy = ScalingPolicy(max_rc=100, segment_cap=16)
    source = synthetic_script(100, low=2, high=12, first_thought=6, seed=5)
    observer, session = _validate(supply_weights, policy, source)
    assert len(observer.boundaries) == 101
    assert observer.passed, observer.first_failure


def test_oracle_agrees_on_sampled_run(supply_weights):
    policy = ScalingPolicy(max_rc=6, segment_cap=16)
    sampling = SamplingConfig(logit_bias={252: 4.0})
    source = SampledSource(sampling, make_rng(2))
    observer, _ = _validate(supply_weights, policy, source)
    assert observer.boundaries
    assert observer.passed, observer.first_failure


def test_oracle_detects_skipped_rematerialization(supply_weights):
    """Test that stale rotated keys after an eviction are caught."""
    policy = ScalingPolicy(max_rc=2, segment_cap=16)
    observer, _ = _validate(
        supply_weights, policy, ScriptedSource(THOUGHTS), fault=FAULT_SKIP_REMATERIALIZE
    )
    assert not observer.passed
    failure = observer.first_failure
    # the first eviction happens when the second cycle is committed
    assert failure.index == 2
    assert failure.rc_count == 2
    assert failure.phase == "finalizing"
    assert failure.deviation > 1.0


def test_recompute_from_cache_matches_incremental(supply_weights):
    """Test the stored-row recomputation against every incremental step."""
    cache = DualKVCache(supply_weights.config, checked=True)
    cache.materialize_all()
    for token in [3, 1, 4, 1, 5, 9, 2, 6]:
        logits = forward_step(supply_weights, token, cache)
        assert logits_close(logits, recompute_from_cache(cache, supply_weights))


def test_recompute_from_cache_ignores_rotated_keys(supply_weights):
    cache = DualKVCache(supply_weights.config)
    cache.materialize_all()
    for token in [7, 8, 9]:
        logits = forward_step(supply_weights, token, cache)
    cache.discard_materialized()
    assert logits_close(logits, recompute_from_cache(cache, supply_weights))
    with pytest.raises(ValueError):
        recompute_from_cache(DualKVCache(supply_weights.config), supply_weights)


def test_oracle_uses_stored_rows_after_replacement(supply_weights):
    """Test that a replaced cycle ends full recomputation but not stored-row checks."""
    policy = ScalingPolicy(max_rc=4, segment_cap=16)
    observer, session = _validate(supply_weights, policy, ScriptedSource(THOUGHTS))
    assert observer.passed, observer.first_failure
    # the second cycle (3 rows) replaces the first (5 rows) at boundary 2
    assert all(b.full_deviation is not None for b in observer.boundaries[:2])
    assert all(b.full_deviation is None for b in observer.boundaries[2:])
    assert all(b.stored_deviation <= 1.0 for b in observer.boundaries)
    cache = session.cache
    assert not cache.exact_history
    # rows after the evicted span saw it in context; a from-scratch pass cannot
    assert not logits_close(
        recompute_from_cache(cache, supply_weights),
        recompute_oracle(cache.token_ids, supply_weights, cache.row_position_ids()),
    )


def test_oracle_recomputes_from_scratch_when_old_cycle_kept(supply_weights):
    policy = ScalingPolicy(max_rc=3, segment_cap=16)
    observer, session = _validate(supply_weights, policy, ScriptedSource(GROWING))
    assert observer.passed, observer.first_failure
    assert session.cache.exact_history
    assert len(observer.boundaries) == 4
    assert all(b.full_deviation is not None for b in observer.boundaries)
