"""
Full-recompute oracle for the incremental decoding path.
"""
from typing import List, Optional, Sequence
from argparse import Namespace

import torch

from minseek_toolbox.model import Weights, forward_from_rows, forward_full
from minseek_toolbox.utils import tensors_close, tolerance_ratio

RTOL = 1e-4
ATOL = 1e-6


def recompute_oracle(
    cache_token_ids: Sequence[int],
    weights: Weights,
    position_ids: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """Logits of the last surviving token, computed from scratch.

    Args:
        cache_token_ids: the cache's surviving tokens in row order.
        weights: the model weights.
        position_ids: explicit positions; defaults to 0..n-1 (contiguous).

    Returns:
        Logits of shape (vocab_size,).
    """
    tokens = list(cache_token_ids)
    if position_ids is None:
        position_ids = range(len(tokens))
    return forward_full(weights, tokens, list(position_ids))[-1]


def recompute_from_cache(cache, weights: Weights) -> torch.Tensor:
    """Logits of the cache's last token, recomputed from its stored rows.

    The stored position-free keys of every earlier row are rotated afresh at
    the cache's row position ids and the last token is run through all layers
    again. Rotated keys held by the cache are never read, so stale or missing
    materialization shows up as a deviation.

    Args:
        cache: a DualKVCache holding at least one token.
        weights: the model weights.

    Returns:
        Logits of shape (vocab_size,).
    """
    if cache.length == 0:
        raise ValueError("recompute_from_cache needs a non-empty cache")
    return forward_from_rows(
        weights,
        cache.token_ids[-1],
        [layer.k_no_pos[:-1] for layer in cache.layers],
        [layer.v[:-1] for layer in cache.layers],
        cache.row_position_ids(),
    )


def logit_deviation(
    incremental: torch.Tensor,
    recomputed: torch.Tensor,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> float:
    """Worst deviation in tolerance units; at most 1 passes."""
    return tolerance_ratio(incremental, recomputed, rtol=rtol, atol=atol)


def logits_close(
    incremental: torch.Tensor,
    recomputed: torch.Tensor,
    rtol: float = RTOL,
    atol: float = ATOL,
) -> bool:
    return tensors_close(incremental, recomputed, rtol=rtol, atol=atol)


class OracleObserver:
    """Session observer comparing incremental logits with the oracle.

    Called after every injected token, i.e. at every think-end boundary once
    the cache has been evicted and re-materialized. Every boundary is checked
    against the stored-row recomputation. While no surviving row was computed
    with an evicted span in context, the from-scratch recomputation over the
    surviving tokens is checked as well; deviation is the worse of the two.
    """

    def __init__(self, rtol: float = RTOL, atol: float = ATOL):
        self.rtol = rtol
        self.atol = atol
        self.boundaries: List[Namespace] = []

    def __call__(self, session, logits: torch.Tensor) -> None:
        cache = session.cache
        stored = recompute_from_cache(cache, session.weights)
        stored_deviation = logit_deviation(logits, stored, self.rtol, self.atol)
        full_deviation = None
        if cache.exact_history:
            recomputed = recompute_oracle(
                cache.token_ids, session.weights, cache.row_position_ids()
            )
            full_deviation = logit_deviation(logits, recomputed, self.rtol, self.atol)
        deviation = max(stored_deviation, full_deviation or 0.0)
        self.boundaries.append(
            Namespace(
                index=len(self.boundaries),
                rc_count=session.state.rc_count,
                phase=session.state.phase,
                rows=cache.length,
                deviation=deviation,
                stored_deviation=stored_deviation,
                full_deviation=full_deviation,
                passed=deviation <= 1.0,
            )
        )

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.boundaries)

    @property
    def max_deviation(self) -> float:
        return max((b.deviation for b in self.boundaries), default=0.0)

    @property
    def first_failure(self) -> Optional[Namespace]:
        for boundary in self.boundaries:
            if not boundary.passed:
                return boundary
        return None
