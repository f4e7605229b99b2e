"""
A minimal decoder-only transformer with rotary position embeddings.

Two forward paths are provided: an incremental path that reads and extends a
KV cache one token at a time, and a from-scratch path over a whole token
sequence with explicit position ids, used as the recompute oracle.
"""
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union
from dataclasses import dataclass, field, asdict
import hashlib
import math

import numpy as np
from scipy.special import softmax
import torch
import torch.nn.functional as F

from minseek_toolbox.utils import (
    assert_is_finite,
    assert_is_strictly_increasing,
    to_np_array,
)

if TYPE_CHECKING:
    from minseek_toolbox.cache import DualKVCache

ARGMAX = 0.0
DEFAULT_TEMPERATURE = 0.6
DEFAULT_TOP_P = 0.95
INIT_STD = 0.02
NORM_EPS = 1e-6


class PositionOverflowError(RuntimeError):
    """A position id would reach the model's maximum context length."""


@dataclass(frozen=True)
class Sentinels:
    """Reserved vocabulary ids marking thought structure."""

    think_end: int = 252
    wait: int = 253
    answer_start: int = 254
    eos: int = 255

    def ids(self) -> Tuple[int, int, int, int]:
        return (self.think_end, self.wait, self.answer_start, self.eos)


@dataclass(frozen=True)
class ModelConfig:
    """Toy transformer architecture description.

    Args:
        n_layers: number of decoder blocks.
        n_heads: number of attention heads per block.
        d_model: residual stream width, equal to n_heads * d_head.
        d_head: per-head width; must be even for rotary pairs.
        d_ff: hidden width of the MLP.
        vocab_size: number of token ids.
        rope_theta: base of the rotary frequencies.
        max_context_length: number of distinct position ids the model accepts.
        sentinel_tokens: the reserved structural token ids.
    """

    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    d_ff: int = 256
    vocab_size: int = 256
    rope_theta: float = 10000.0
    max_context_length: int = 128
    sentinel_tokens: Sentinels = field(default_factory=Sentinels)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """Raise ValueError if the configuration is inconsistent."""
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_ff", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive count")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                "d_model ({}) must equal n_heads * d_head ({} * {})".format(
                    self.d_model, self.n_heads, self.d_head
                )
            )
        if self.d_head % 2 != 0:
            raise ValueError(f"d_head must be even for rotary pairs, got {self.d_head}")
        if not self.rope_theta > 0:
            raise ValueError("rope_theta must be positive")
        if self.max_context_length < 1:
            raise ValueError("max_context_length must be at least 1")
        ids = self.sentinel_tokens.ids()
        if len(set(ids)) != len(ids):
            raise ValueError(f"sentinel token ids must be pairwise distinct, got {ids}")
        if any(i < 0 or i >= self.vocab_size for i in ids):
            raise ValueError(f"sentinel token ids must be < vocab_size, got {ids}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class LayerWeights:
    norm_attn: torch.Tensor
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    norm_mlp: torch.Tensor
    w_in: torch.Tensor
    w_out: torch.Tensor


@dataclass(frozen=True, eq=False)
class Weights:
    """Immutable model parameters; safe to share across sessions."""

    config: ModelConfig
    token_embedding: torch.Tensor
    layers: Tuple[LayerWeights, ...]
    norm_final: torch.Tensor
    unembedding: torch.Tensor

    def tensors(self) -> List[torch.Tensor]:
        """All parameter tensors in a fixed order."""
        out = [self.token_embedding]
        for layer in self.layers:
            out.extend(
                [
                    layer.norm_attn,
                    layer.w_q,
                    layer.w_k,
                    layer.w_v,
                    layer.w_o,
                    layer.norm_mlp,
                    layer.w_in,
                    layer.w_out,
                ]
            )
        out.extend([self.norm_final, self.unembedding])
        return out

    def checksum(self) -> str:
        """sha256 over the raw bytes of every parameter tensor."""
        digest = hashlib.sha256()
        for tensor in self.tensors():
            digest.update(tensor.contiguous().numpy().tobytes())
        return digest.hexdigest()


def init_weights(config: ModelConfig, seed: int) -> Weights:
    """Deterministic toy weights.

    Matrices are drawn from a zero-mean Gaussian with standard deviation 0.02
    using a counter-based (Philox) generator, so the same (config, seed) gives
    byte-identical parameters on every platform. Normalization gains are ones.

    Args:
        config: the architecture description.
        seed: integer seed of the Philox stream.

    Returns:
        The model weights.
    """
    config.validate()
    rng = np.random.Generator(np.random.Philox(seed))

    def gaussian(*shape):
        arr = rng.normal(loc=0.0, scale=INIT_STD, size=shape).astype(np.float32)
        return torch.from_numpy(arr)

    def ones(n):
        return torch.ones(n, dtype=torch.float32)

    d, f = config.d_model, config.d_ff
    token_embedding = gaussian(config.vocab_size, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                norm_attn=ones(d),
                w_q=gaussian(d, d),
                w_k=gaussian(d, d),
                w_v=gaussian(d, d),
                w_o=gaussian(d, d),
                norm_mlp=ones(d),
                w_in=gaussian(d, f),
                w_out=gaussian(f, d),
            )
        )
    unembedding = gaussian(d, config.vocab_size)

    return Weights(
        config=config,
        token_embedding=token_embedding,
        layers=tuple(layers),
        norm_final=ones(d),
        unembedding=unembedding,
    )


def rope_frequencies(d_head: int, theta: float) -> torch.Tensor:
    """Inverse frequencies theta^(-2i/d_head), i in [0, d_head/2), in float64."""
    return 1.0 / (theta ** (torch.arange(0, d_head, 2, dtype=torch.float64) / d_head))


def apply_rope(
    vec: torch.Tensor,
    position_id: Union[int, Sequence[int], torch.Tensor],
    theta: float,
) -> torch.Tensor:
    """Rotate consecutive pairs of the last axis by position-dependent angles.

    Pair i of a vector at position p is rotated by p * theta^(-2i/d). Angles
    and the rotation are computed in float64 and cast back to the input dtype.

    Args:
        vec: tensor of shape (..., d) with d even.
        position_id: a single position, or one position per entry of the first
            axis of vec (shape (n,) for vec of shape (n, ..., d)).
        theta: base of the rotary frequencies.

    Returns:
        The rotated tensor, same shape and dtype as vec.
    """
    d = vec.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"Rotary embeddings need an even last axis, got {d}")
    positions = torch.as_tensor(position_id, dtype=torch.float64)
    if bool((positions < 0).any()):
        raise ValueError("position ids must be non-negative")

    angles = positions.unsqueeze(-1) * rope_frequencies(d, theta)
    while angles.dim() < vec.dim():
        angles = angles.unsqueeze(-2)
    cos, sin = torch.cos(angles), torch.sin(angles)

    x = vec.to(torch.float64)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    rot_even = x_even * cos - x_odd * sin
    rot_odd = x_even * sin + x_odd * cos
    out = torch.stack([rot_even, rot_odd], dim=-1).flatten(-2)
    return out.to(vec.dtype)


def attention_step(
    query: torch.Tensor,
    k_materialized: torch.Tensor,
    values: torch.Tensor,
    scale: Optional[float] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Single-query attention over every cached entry.

    Args:
        query: rotated query, shape (n_heads, d_head).
        k_materialized: rotated keys, shape (n, n_heads, d_head).
        values: values, shape (n, n_heads, d_head).
        scale: score multiplier, defaults to 1/sqrt(d_head).

    Returns:
        The concatenated per-head context vector of shape (n_heads * d_head,)
        and the softmax weights of shape (n_heads, n).
    """
    if k_materialized.shape[0] == 0:
        raise ValueError("attention over an empty cache")
    if k_materialized.shape != values.shape:
        raise ValueError("keys and values must have the same shape")
    if scale is None:
        scale = 1.0 / math.sqrt(query.shape[-1])

    scores = torch.einsum("hd,nhd->hn", query, k_materialized) * scale
    weights = torch.softmax(scores, dim=-1)
    context = torch.einsum("hn,nhd->hd", weights, values)
    return context.reshape(-1), weights


def rms_norm(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + NORM_EPS) * gain


def _mlp(x: torch.Tensor, layer: LayerWeights) -> torch.Tensor:
    h = rms_norm(x, layer.norm_mlp)
    return F.gelu(h @ layer.w_in) @ layer.w_out


@torch.no_grad()
def forward_step(
    weights: Weights,
    token_id: int,
    cache: "DualKVCache",
    query_position_id: Optional[int] = None,
) -> torch.Tensor:
    """Incremental forward pass of one token through a materialized cache.

    Appends exactly one row per layer to the cache and returns next-token
    logits. The query is rotated with the same position as the new key,
    which is the cache's next position id (its length in contiguous mode).

    Args:
        weights: the model weights.
        token_id: the input token.
        cache: a materialized DualKVCache; extended in place.
        query_position_id: optional expected position; must match the cache.

    Returns:
        Logits of shape (vocab_size,).
    """
    config = weights.config
    if not 0 <= token_id < config.vocab_size:
        raise ValueError(f"token id {token_id} outside vocabulary")
    position = cache.next_position_id
    if query_position_id is not None and query_position_id != position:
        raise ValueError(
            "query position {} does not follow the cache (expected {})".format(
                query_position_id, position
            )
        )
    if position >= config.max_context_length:
        raise PositionOverflowError(
            "position id {} reaches max_context_length {}".format(
                position, config.max_context_length
            )
        )

    x = weights.token_embedding[token_id]
    shape = (config.n_heads, config.d_head)
    for layer_id, layer in enumerate(weights.layers):
        h = rms_norm(x, layer.norm_attn)
        q = (h @ layer.w_q).reshape(shape)
        k_no_pos = (h @ layer.w_k).reshape(shape)
        v = (h @ layer.w_v).reshape(shape)
        q_rot = apply_rope(q, position, config.rope_theta)
        k_rot = apply_rope(k_no_pos, position, config.rope_theta)
        keys, values = cache.update(k_rot, k_no_pos, v, layer_id)
        context, _ = attention_step(q_rot, keys, values)
        x = x + context @ layer.w_o
        x = x + _mlp(x, layer)
    cache.push_token(token_id, position)

    logits = rms_norm(x, weights.norm_final) @ weights.unembedding
    return logits


@torch.no_grad()
def forward_full(
    weights: Weights,
    token_ids: Sequence[int],
    position_ids: Sequence[int],
) -> torch.Tensor:
    """Causal forward pass over a whole sequence, computed from scratch.

    Args:
        weights: the model weights.
        token_ids: the input tokens.
        position_ids: one strictly increasing position id per token.

    Returns:
        Logits of shape (len(token_ids), vocab_size).
    """
    config = weights.config
    tokens = torch.as_tensor(list(token_ids), dtype=torch.long)
    positions = torch.as_tensor(list(position_ids), dtype=torch.long)
    if tokens.shape != positions.shape:
        raise ValueError(
            "token_ids and position_ids differ in length ({} vs {})".format(
                tokens.shape[0], positions.shape[0]
            )
        )
    n = tokens.shape[0]
    if n == 0:
        raise ValueError("forward_full needs at least one token")
    try:
        assert_is_strictly_increasing(positions)
    except AssertionError as err:
        raise ValueError("position_ids must be strictly increasing") from err
    if int(positions[-1]) >= config.max_context_length or int(positions[0]) < 0:
        raise PositionOverflowError(
            "position ids must lie in [0, {})".format(config.max_context_length)
        )

    shape = (n, config.n_heads, config.d_head)
    causal = torch.ones(n, n, dtype=torch.bool).tril()
    scale = 1.0 / math.sqrt(config.d_head)
    x = weights.token_embedding[tokens]
    for layer in weights.layers:
        h = rms_norm(x, layer.norm_attn)
        q = apply_rope((h @ layer.w_q).reshape(shape), positions, config.rope_theta)
        k = apply_rope((h @ layer.w_k).reshape(shape), positions, config.rope_theta)
        v = (h @ layer.w_v).reshape(shape)
        scores = torch.einsum("qhd,khd->hqk", q, k) * scale
        scores = scores.masked_fill(~causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        context = torch.einsum("hqk,khd->qhd", attn, v).reshape(n, -1)
        x = x + context @ layer.w_o
        x = x + _mlp(x, layer)

    return rms_norm(x, weights.norm_final) @ weights.unembedding


@torch.no_grad()
def forward_from_rows(
    weights: Weights,
    token_id: int,
    k_no_pos_rows: Sequence[torch.Tensor],
    v_rows: Sequence[torch.Tensor],
    position_ids: Sequence[int],
) -> torch.Tensor:
    """Logits of one token attending to stored position-free rows.

    The stored keys are rotated afresh at position_ids[:-1]; the token's own
    query, key and value are computed from its embedding at position_ids[-1].
    No rotated key kept by a cache is read.

    Args:
        weights: the model weights.
        token_id: the token being decoded.
        k_no_pos_rows: per layer, the preceding rows' keys without position
            embedding, shape (n - 1, n_heads, d_head).
        v_rows: per layer, the matching values.
        position_ids: n positions, the last one belonging to token_id.

    Returns:
        Logits of shape (vocab_size,).
    """
    config = weights.config
    if len(k_no_pos_rows) != config.n_layers or len(v_rows) != config.n_layers:
        raise ValueError("forward_from_rows needs stored rows for every layer")
    positions = torch.as_tensor(list(position_ids), dtype=torch.long)
    if positions.shape[0] == 0:
        raise ValueError("forward_from_rows needs the token's own position")
    if int(positions[-1]) >= config.max_context_length:
        raise PositionOverflowError(
            "position id {} reaches max_context_length {}".format(
                int(positions[-1]), config.max_context_length
            )
        )
    prior, own = positions[:-1], positions[-1:]

    shape = (1, config.n_heads, config.d_head)
    scale = 1.0 / math.sqrt(config.d_head)
    x = weights.token_embedding[token_id].unsqueeze(0)
    for layer, k_stored, v_stored in zip(weights.layers, k_no_pos_rows, v_rows):
        if k_stored.shape[0] != prior.shape[0] or v_stored.shape[0] != prior.shape[0]:
            raise ValueError("stored rows do not match position_ids")
        h = rms_norm(x, layer.norm_attn)
        q = apply_rope((h @ layer.w_q).reshape(shape), own, config.rope_theta)
        k_own = apply_rope((h @ layer.w_k).reshape(shape), own, config.rope_theta)
        k = torch.cat([apply_rope(k_stored, prior, config.rope_theta), k_own], dim=0)
        v = torch.cat([v_stored, (h @ layer.w_v).reshape(shape)], dim=0)
        scores = torch.einsum("qhd,khd->hqk", q, k) * scale
        attn = torch.softmax(scores, dim=-1)
        context = torch.einsum("hqk,khd->qhd", attn, v).reshape(1, -1)
        x = x + context @ layer.w_o
        x = x + _mlp(x, layer)

    return (rms_norm(x, weights.norm_final) @ weights.unembedding)[0]


@dataclass(frozen=True)
class SamplingConfig:
    """Decoding distribution settings.

    temperature == ARGMAX selects greedy decoding. logit_bias adds a constant
    to the logit of each listed token id before temperature scaling.
    """

    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    logit_bias: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be positive, or ARGMAX (0.0)")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based random stream used for sampling."""
    return np.random.Generator(np.random.Philox(seed))


def nucleus_distribution(
    logits: Union[np.ndarray, torch.Tensor],
    temperature: float = DEFAULT_TEMPERATURE,
    top_p: float = DEFAULT_TOP_P,
) -> np.ndarray:
    """Renormalized top-p distribution over the vocabulary.

    Keeps the smallest prefix of the probability-sorted vocabulary whose mass
    reaches top_p and renormalizes it.
    """
    if not temperature > 0:
        raise ValueError("nucleus_distribution needs a positive temperature")
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    logits = np.asarray(to_np_array(logits), dtype=np.float64)
    probs = softmax(logits / temperature)
    if top_p >= 1.0:
        return probs

    order = np.argsort(-probs, kind="stable")
    sorted_probs = probs[order]
    mass_before = np.cumsum(sorted_probs) - sorted_probs
    keep = mass_before < top_p
    filtered = np.zeros_like(probs)
    filtered[order[keep]] = sorted_probs[keep]
    return filtered / filtered.sum()


def sample(
    logits: Union[np.ndarray, torch.Tensor],
    temperature: float = DEFAULT_TEMPERATURE,
    top_p: float = DEFAULT_TOP_P,
    rng_state: Optional[np.random.Generator] = None,
) -> int:
    """Draw the next token id.

    Args:
        logits: finite next-token logits.
        temperature: softmax temperature; ARGMAX (0.0) selects the maximal logit.
        top_p: nucleus mass in (0, 1].
        rng_state: numpy Generator, advanced by exactly one uniform draw.

    Returns:
        The sampled token id.
    """
    if isinstance(logits, torch.Tensor):
        assert_is_finite(logits)
    else:
        assert_is_finite(np.asarray(logits))
    if temperature < 0:
        raise ValueError("temperature must be positive, or ARGMAX (0.0)")
    if temperature == ARGMAX:
        return int(np.argmax(np.asarray(to_np_array(logits))))
    if rng_state is None:
        raise ValueError("sampling with a positive temperature needs rng_state")

    probs = nucleus_distribution(logits, temperature, top_p)
    cdf = np.cumsum(probs)
    draw = rng_state.random() * cdf[-1]
    token = int(np.searchsorted(cdf, draw, side="right"))
    return min(token, probs.shape[0] - 1)
