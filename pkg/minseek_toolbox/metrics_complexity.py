"""
Metrics for the computational and memory cost of decoding.
"""
from typing import TYPE_CHECKING, Dict, List, Sequence
from argparse import Namespace
from dataclasses import dataclass, asdict

import numpy as np
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score
from sklearn.preprocessing import PolynomialFeatures

if TYPE_CHECKING:
    from minseek_toolbox.cache import DualKVCache

MIN_CYCLES = 20


@dataclass(frozen=True)
class CostRecord:
    """Cost of one incremental forward step.

    attention_scores is the number of query-key scores evaluated, i.e. the
    cache length after the append times n_layers times n_heads.
    """

    attention_scores: int
    cache_rows: int
    wall_time: float
    cumulative_tokens: int
    rc_index: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


def cumulative_cost(records: Sequence[CostRecord]) -> Namespace:
    """Cumulative tokens and attention scores as flat arrays."""
    tokens = np.array([r.cumulative_tokens for r in records], dtype=np.float64)
    scores = np.cumsum([r.attention_scores for r in records]).astype(np.float64)
    wall = np.cumsum([r.wall_time for r in records]).astype(np.float64)
    return Namespace(tokens=tokens, attention_scores=scores, wall_time=wall)


def fit_complexity(
    records: Sequence[CostRecord],
    min_cycles: int = MIN_CYCLES,
) -> Dict[str, float]:
    """Fit cumulative attention cost against cumulative tokens.

    Linear and quadratic least-squares models are fit; a cost that grows
    linearly with the sequence gives linear_r2 close to 1 and a negligible
    quadratic coefficient.

    Args:
        records: per-step cost records of one or more runs, in order.
        min_cycles: required number of reconstruction cycles in the records.

    Returns:
        A dictionary with the linear fit's r^2 ('linear_r2'), slope ('slope')
        and intercept ('intercept'), the quadratic fit's r^2 ('quadratic_r2')
        and leading coefficient ('quadratic_coef'), and the largest per-token
        attention score count ('max_per_token').
    """
    # Check that enough cycles were recorded
    if len(records) < 3:
        raise ValueError("fit_complexity needs at least 3 cost records")
    n_cycles = max(r.rc_index for r in records)
    if n_cycles < min_cycles:
        raise ValueError(
            "fit_complexity needs at least {} reconstruction cycles, got {}".format(
                min_cycles, n_cycles
            )
        )

    curve = cumulative_cost(records)
    x = curve.tokens.reshape(-1, 1)
    y = curve.attention_scores

    linear = LinearRegression().fit(x, y)
    linear_r2 = r2_score(y, linear.predict(x))

    x_quad = PolynomialFeatures(degree=2, include_bias=False).fit_transform(x)
    quadratic = LinearRegression().fit(x_quad, y)
    quadratic_r2 = r2_score(y, quadratic.predict(x_quad))

    return {
        "linear_r2": float(linear_r2),
        "slope": float(linear.coef_[0]),
        "intercept": float(linear.intercept_),
        "quadratic_r2": float(quadratic_r2),
        "quadratic_coef": float(quadratic.coef_[1]),
        "max_per_token": float(max(r.attention_scores for r in records)),
    }


def per_cycle_cost(records: Sequence[CostRecord]) -> Dict[int, float]:
    """Mean attention scores per token, grouped by reconstruction cycle index."""
    grouped: Dict[int, List[int]] = {}
    for record in records:
        grouped.setdefault(record.rc_index, []).append(record.attention_scores)
    return {k: float(np.mean(v)) for k, v in sorted(grouped.items())}


def cumulative_at_cycle(records: Sequence[CostRecord], rc_index: int) -> int:
    """Total attention scores up to and including the last step of a cycle."""
    total = 0
    seen = False
    for record in records:
        if record.rc_index > rc_index:
            break
        total += record.attention_scores
        seen = seen or record.rc_index == rc_index
    if not seen:
        raise ValueError(f"no cost records for cycle {rc_index}")
    return total


def memory_probe(cache: "DualKVCache") -> Namespace:
    """Row counts and byte estimates per key/value representation.

    Args:
        cache: the cache to inspect.

    Returns:
        A Namespace with rows, k_no_pos_bytes, v_bytes, k_materialized_bytes,
        key_bytes (both key copies) and key_value_ratio.
    """
    sizes = cache.nbytes()
    key_bytes = sizes["k_no_pos"] + sizes["k_materialized"]
    ratio = key_bytes / sizes["v"] if sizes["v"] else float("nan")
    return Namespace(
        rows=cache.length,
        k_no_pos_bytes=sizes["k_no_pos"],
        v_bytes=sizes["v"],
        k_materialized_bytes=sizes["k_materialized"],
        key_bytes=key_bytes,
        key_value_ratio=ratio,
    )
