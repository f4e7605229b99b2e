"""
Metrics normalized by their standard-generation (M = 0) baseline.
"""
from typing import Dict, List, Mapping, Optional
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NormalizedMetric:
    max_rc: Optional[int]
    raw: float
    baseline: float
    normalized: float

    @property
    def percent_change(self) -> float:
        """Change relative to the baseline in percent, e.g. 1.069 -> 6.9."""
        return (self.normalized - 1.0) * 100.0


def normalize(
    values: Mapping[Optional[int], float],
    baseline_key: Optional[int] = 0,
) -> List[NormalizedMetric]:
    """Divide per-M measurements by the measurement at M = 0.

    Args:
        values: measurement per M (None for unbounded); must contain the
            baseline key.
        baseline_key: the M whose value is the baseline.

    Returns:
        One NormalizedMetric per entry, in the input order. The baseline entry
        is normalized to exactly 1.
    """
    if baseline_key not in values:
        raise ValueError(f"no baseline measurement for M = {baseline_key}")
    baseline = float(values[baseline_key])
    if not np.isfinite(baseline) or baseline <= 0:
        raise ValueError(f"baseline must be positive, got {baseline}")

    out = []
    for max_rc, raw in values.items():
        raw = float(raw)
        normalized = 1.0 if max_rc == baseline_key else raw / baseline
        out.append(
            NormalizedMetric(
                max_rc=max_rc, raw=raw, baseline=baseline, normalized=normalized
            )
        )
    return out


def normalized_table(
    per_method: Mapping[str, Mapping[Optional[int], float]],
) -> Dict[str, List[NormalizedMetric]]:
    return {method: normalize(values) for method, values in per_method.items()}
