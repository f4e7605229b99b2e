"""
Tests for the toy transformer, rotary embeddings and sampling.
"""

import pytest
import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from scipy.special import softmax

from minseek_toolbox.cache import DualKVCache
from minseek_toolbox.model import (
    ARGMAX,
    DEFAULT_TEMPERATURE,
    DEFAULT_TOP_P,
    ModelConfig,
    PositionOverflowError,
    SamplingConfig,
    Sentinels,
    apply_rope,
    attention_step,
    forward_full,
    forward_step,
    init_weights,
    make_rng,
    nucleus_distribution,
    sample,
)
from minseek_toolbox.oracle import logits_close


@pytest.fixture
def supply_model():
    config = ModelConfig()
    weights = init_weights(config, seed=7)
    return config, weights


def _vectors(n):
    return arrays(np.float32, n, elements=st.floats(-1, 1, width=32))


def test_model_config_defaults():
    """Test the toy architecture defaults and sentinel ids."""
    config = ModelConfig()
    assert (config.n_layers, config.n_heads, config.d_model) == (4, 4, 64)
    assert config.d_ff == 256 and config.vocab_size == 256
    assert config.d_model == config.n_heads * config.d_head
    assert len(set(config.sentinel_tokens.ids())) == 4


def test_model_config_rejects_invalid():
    """Test that inconsistent shapes and sentinels are rejected."""
    with pytest.raises(ValueError):
        ModelConfig(n_heads=4, d_head=15, d_model=60)
    with pytest.raises(ValueError):
        ModelConfig(d_model=63)
    with pytest.raises(ValueError):
        ModelConfig(sentinel_tokens=Sentinels(think_end=3, wait=3))
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=100)
    with pytest.raises(ValueError):
        ModelConfig(max_context_length=0)


def test_init_weights_deterministic():
    """Test that weights are reproducible from (config, seed)."""
    config = ModelConfig()
    first = init_weights(config, seed=7)
    second = init_weights(config, seed=7)
    other = init_weights(config, seed=8)
    assert first.checksum() == second.checksum()
    assert first.checksum() != other.checksum()
    for a, b in zip(first.tensors(), second.tensors()):
        assert torch.equal(a, b)


def test_init_weights_shapes(supply_model):
    """Test that parameter shapes follow the configuration."""
    config, weights = supply_model
    assert weights.token_embedding.shape == (config.vocab_size, config.d_model)
    assert weights.unembedding.shape == (config.d_model, config.vocab_size)
    assert len(weights.layers) == config.n_layers
    layer = weights.layers[0]
    assert layer.w_in.shape == (config.d_model, config.d_ff)
    assert layer.w_out.shape == (config.d_ff, config.d_model)
    assert torch.all(layer.norm_attn == 1.0)
    assert abs(float(layer.w_q.std()) - 0.02) < 0.002


def test_apply_rope_position_zero_is_identity():
    """Test that position 0 leaves the vector unchanged."""
    vec = torch.randn(4, 16)
    assert torch.equal(apply_rope(vec, 0, 10000.0), vec)


def test_apply_rope_rejects_odd_and_negative():
    with pytest.raises(ValueError):
        apply_rope(torch.ones(5), 1, 10000.0)
    with pytest.raises(ValueError):
        apply_rope(torch.ones(4), -1, 10000.0)


def test_apply_rope_pairs_rotate_independently():
    """Test the angle of the first pair, which rotates by exactly the position."""
    vec = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    out = apply_rope(vec, 3, 10000.0)
    assert np.abs(float(out[0]) - np.cos(3.0)) < 1e-12
    assert np.abs(float(out[1]) - np.sin(3.0)) < 1e-12
    angle = 3.0 * 10000.0 ** (-2.0 / 4.0)
    assert np.abs(float(out[3]) - np.sin(angle)) < 1e-12


def test_apply_rope_per_row_positions():
    """Test that a vector of positions rotates each row by its own position."""
    keys = torch.randn(5, 4, 16)
    positions = torch.arange(5)
    batched = apply_rope(keys, positions, 10000.0)
    for i in range(5):
        assert torch.allclose(batched[i], apply_rope(keys[i], i, 10000.0), atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(_vectors(16), st.integers(0, 100000))
def test_apply_rope_preserves_norm(vec, position):
    """Test that rotations are isometries."""
    vec = torch.from_numpy(vec)
    out = apply_rope(vec, position, 10000.0)
    assert abs(float(out.norm()) - float(vec.norm())) < 1e-6 * max(1.0, float(vec.norm()))


@settings(max_examples=1000, deadline=None)
@given(
    _vectors(16),
    _vectors(16),
    st.integers(0, 2000),
    st.integers(0, 2000),
    st.sampled_from([1, 10, 100]),
)
def test_apply_rope_relative_offset_invariance(q, k, p, p_prime, shift):
    """Test that scores depend only on the offset between positions."""
    q, k = torch.from_numpy(q), torch.from_numpy(k)
    base = torch.dot(apply_rope(q, p, 10000.0), apply_rope(k, p_prime, 10000.0))
    shifted = torch.dot(
        apply_rope(q, p + shift, 10000.0), apply_rope(k, p_prime + shift, 10000.0)
    )
    assert abs(float(base) - float(shifted)) < 1e-5


def test_attention_step_single_entry():
    """Test that one cached entry receives all the weight."""
    query = torch.randn(4, 16)
    keys = torch.randn(1, 4, 16)
    values = torch.randn(1, 4, 16)
    context, weights = attention_step(query, keys, values)
    assert torch.allclose(weights, torch.ones(4, 1))
    assert torch.allclose(context, values[0].reshape(-1))


def test_attention_step_matches_direct_softmax():
    """Test weights against a brute-force softmax(q k / sqrt(d)) per head."""
    torch.manual_seed(0)
    query = torch.randn(4, 16)
    keys = torch.randn(4, 4, 16)
    values = torch.randn(4, 4, 16)
    context, weights = attention_step(query, keys, values)
    for h in range(4):
        scores = np.array([float(query[h] @ keys[j, h]) for j in range(4)]) / 4.0
        expected = softmax(scores)
        assert np.max(np.abs(weights[h].numpy() - expected)) < 1e-6
        assert np.abs(float(weights[h].sum()) - 1.0) < 1e-6
        expected_context = sum(expected[j] * values[j, h].numpy() for j in range(4))
        assert np.max(np.abs(context.reshape(4, 16)[h].numpy() - expected_context)) < 1e-5


def test_attention_step_uniform_keys():
    """Test that identical keys give uniform weights."""
    query = torch.randn(4, 16)
    keys = query.unsqueeze(0).repeat(6, 1, 1)
    _, weights = attention_step(query, keys, torch.randn(6, 4, 16))
    assert torch.allclose(weights, torch.full((4, 6), 1 / 6), atol=1e-6)


def test_attention_step_empty_cache():
    with pytest.raises(ValueError):
        attention_step(torch.randn(4, 16), torch.zeros(0, 4, 16), torch.zeros(0, 4, 16))


def test_forward_step_appends_one_row(supply_model):
    """Test that each step extends every layer by exactly one row."""
    config, weights = supply_model
    cache = DualKVCache(config, checked=True)
    cache.materialize_all()
    for i, token in enumerate([3, 9, 27]):
        logits = forward_step(weights, token, cache, query_position_id=i)
        assert logits.shape == (config.vocab_size,)
        assert all(len(layer) == i + 1 for layer in cache.layers)
    assert cache.token_ids == [3, 9, 27]
    assert cache.next_position_id == 3


def test_forward_step_rejects_wrong_query_position(supply_model):
    config, weights = supply_model
    cache = DualKVCache(config)
    cache.materialize_all()
    with pytest.raises(ValueError):
        forward_step(weights, 1, cache, query_position_id=1)


def test_forward_step_finite_over_many_steps(supply_model):
    """Test that logits stay finite over 100 random steps."""
    config, weights = supply_model
    cache = DualKVCache(config)
    cache.materialize_all()
    rng = make_rng(0)
    for token in rng.integers(0, config.vocab_size, size=100):
        logits = forward_step(weights, int(token), cache)
        assert bool(torch.isfinite(logits).all())


def test_forward_step_position_overflow():
    """Test that no row is appended at max_context_length."""
    config = ModelConfig(max_context_length=3)
    weights = init_weights(config, seed=0)
    cache = DualKVCache(config)
    cache.materialize_all()
    for token in (1, 2, 3):
        forward_step(weights, token, cache)
    with pytest.raises(PositionOverflowError):
        forward_step(weights, 4, cache)


def test_forward_step_checked_first_token_all_layers(supply_model):
    """Test that a checked cache accepts the first token through every layer."""
    config, weights = supply_model
    cache = DualKVCache(config, checked=True)
    cache.materialize_all()
    logits = forward_step(weights, 17, cache)
    assert bool(torch.isfinite(logits).all())
    for layer in cache.layers:
        assert torch.allclose(
            layer.k_materialized, apply_rope(layer.k_no_pos, 0, config.rope_theta)
        )


def test_forward_step_fills_last_position():
    """Test that position max_context_length - 1 is usable and the next one is not."""
    config = ModelConfig(max_context_length=8)
    weights = init_weights(config, seed=0)
    cache = DualKVCache(config, checked=True)
    cache.materialize_all()
    for token in range(1, 9):
        forward_step(weights, token, cache)
    assert cache.length == 8
    assert cache.position_ids[-1] == 7
    with pytest.raises(PositionOverflowError):
        forward_step(weights, 9, cache)


def test_forward_full_matches_incremental(supply_model):
    """Test that every incremental step equals the full recomputation."""
    config, weights = supply_model
    tokens = [int(t) for t in make_rng(1).integers(0, 250, size=40)]
    cache = DualKVCache(config, checked=True)
    cache.materialize_all()
    incremental = [forward_step(weights, t, cache) for t in tokens]
    full = forward_full(weights, tokens, list(range(len(tokens))))
    assert full.shape == (40, config.vocab_size)
    for i, logits in enumerate(incremental):
        assert logits_close(logits, full[i])


def test_forward_full_single_token(supply_model):
    config, weights = supply_model
    cache = DualKVCache(config)
    cache.materialize_all()
    step = forward_step(weights, 42, cache)
    full = forward_full(weights, [42], [0])
    assert logits_close(step, full[0])


def test_forward_full_rejects_bad_positions(supply_model):
    config, weights = supply_model
    with pytest.raises(ValueError):
        forward_full(weights, [1, 2, 3], [0, 2, 1])
    with pytest.raises(ValueError):
        forward_full(weights, [1, 2], [0, 1, 2])
    with pytest.raises(ValueError):
        forward_full(weights, [], [])
    with pytest.raises(PositionOverflowError):
        forward_full(weights, [1, 2], [0, config.max_context_length])


def test_sample_argmax_deterministic():
    """Test that argmax mode returns the maximal logit without an rng."""
    logits = np.array([0.1, 2.5, -1.0, 2.4])
    assert sample(logits, temperature=ARGMAX) == 1
    assert sample(torch.tensor(logits), temperature=ARGMAX) == 1


def test_sample_rejects_negative_temperature_and_nan():
    with pytest.raises(ValueError):
        sample(np.zeros(4), temperature=-0.5, rng_state=make_rng(0))
    with pytest.raises(AssertionError):
        sample(np.array([0.0, np.nan]), rng_state=make_rng(0))


def test_sampling_defaults():
    """Test the default temperature and nucleus mass."""
    assert DEFAULT_TEMPERATURE == 0.6
    assert DEFAULT_TOP_P == 0.95
    sampling = SamplingConfig()
    assert (sampling.temperature, sampling.top_p) == (0.6, 0.95)
    with pytest.raises(ValueError):
        SamplingConfig(top_p=0.0)


def test_sample_same_seed_same_stream():
    logits = make_rng(3).normal(size=32)
    rng = make_rng(5)
    first = [sample(logits, rng_state=rng) for _ in range(20)]
    rng = make_rng(5)
    second = [sample(logits, rng_state=rng) for _ in range(20)]
    assert first == second


def test_nucleus_distribution_keeps_smallest_prefix():
    """Test that top_p keeps the smallest prefix reaching the mass."""
    logits = np.log(np.array([0.5, 0.3, 0.15, 0.05]))
    probs = nucleus_distribution(logits, temperature=1.0, top_p=0.7)
    assert np.allclose(probs, [0.5 / 0.8, 0.3 / 0.8, 0.0, 0.0])
    probs = nucleus_distribution(logits, temperature=1.0, top_p=0.81)
    assert np.allclose(probs, np.array([0.5, 0.3, 0.15, 0.0]) / 0.95)
    assert np.allclose(nucleus_distribution(logits, 1.0, 1.0), np.exp(logits))


def test_sample_full_distribution_chi_square():
    """Test empirical frequencies against the exact softmax over 1e5 draws."""
    logits = make_rng(11).normal(size=8)
    rng = make_rng(12)
    n = 100000
    draws = np.array([sample(logits, 1.0, 1.0, rng) for _ in range(n)])
    observed = np.bincount(draws, minlength=8)
    expected = softmax(logits) * n
    _, p_value = stats.chisquare(observed, expected)
    # 3 sigma
    assert p_value > 0.0027
