"""
Metrics for comparing the cost of sequential scaling methods.
"""
from typing import Any, Dict, List, Mapping, Optional, Sequence

from minseek_toolbox.metrics_complexity import (
    CostRecord,
    fit_complexity,
    per_cycle_cost,
    cumulative_cost,
)
from minseek_toolbox.metrics_normalized import NormalizedMetric, normalize


METRIC_NAMES = {
    "linear_r2": "Linear fit R2",
    "slope": "Linear slope",
    "intercept": "Linear intercept",
    "quadratic_r2": "Quadratic fit R2",
    "quadratic_coef": "Quadratic coefficient",
    "max_per_token": "Max scores per token",
    "total_scores": "Total attention scores",
    "total_tokens": "Total tokens",
    "total_wall_time": "Total wall time (s)",
    "monotone_cycles": "Per-cycle cost monotone",
}


def get_all_complexity_metrics(
    records: Sequence[CostRecord],
    min_cycles: int = 20,
    verbose: bool = True,
) -> Dict[str, float]:
    """Compute complexity fits and totals for one run.

    Args:
        records: per-step cost records of the run.
        min_cycles: the number of cycles fit_complexity requires.
        verbose: Activate verbose mode.

    Returns:
        The fit results plus total attention scores, tokens and wall time, and
        whether the mean per-token cost strictly increases cycle over cycle.
    """
    if verbose:
        print(" (1/2) Fitting cumulative attention cost")

    metrics = fit_complexity(records, min_cycles=min_cycles)
    curve = cumulative_cost(records)
    per_cycle = list(per_cycle_cost(records).values())
    metrics["total_scores"] = float(curve.attention_scores[-1])
    metrics["total_tokens"] = float(curve.tokens[-1])
    metrics["total_wall_time"] = float(curve.wall_time[-1])
    metrics["monotone_cycles"] = float(
        all(b > a for a, b in zip(per_cycle, per_cycle[1:]))
    )
    return metrics


def get_all_normalized_metrics(
    totals: Mapping[str, Mapping[Optional[int], Mapping[str, float]]],
    verbose: bool = True,
) -> Dict[str, Dict[str, List[NormalizedMetric]]]:
    """Normalize per-M totals of each method by its M = 0 value.

    Args:
        totals: method -> M -> {"attention_scores": ..., "wall_time": ...}.
        verbose: Activate verbose mode.

    Returns:
        method -> quantity -> normalized metrics in M order.
    """
    if verbose:
        print(" (2/2) Normalizing by the M = 0 baseline")

    out: Dict[str, Dict[str, List[NormalizedMetric]]] = {}
    for method, per_m in totals.items():
        quantities = sorted({q for values in per_m.values() for q in values})
        out[method] = {
            q: normalize({m: values[q] for m, values in per_m.items()})
            for q in quantities
        }
    return out


def print_normalized_table(
    normalized: Mapping[str, Mapping[str, List[NormalizedMetric]]]
) -> None:
    print(" Normalized Computation ".center(60, "="))
    for method, quantities in normalized.items():
        print("  {}".format(method))
        for quantity, metrics in quantities.items():
            row = "  ".join(
                "M={}: {:.3f}".format("inf" if m.max_rc is None else m.max_rc, m.normalized)
                for m in metrics
            )
            print("     {:<17} {}".format(quantity, row))


def get_all_metrics(
    records_by_method: Mapping[str, Sequence[CostRecord]],
    totals: Optional[Mapping[str, Mapping[Optional[int], Mapping[str, float]]]] = None,
    min_cycles: int = 20,
    verbose: bool = True,
) -> Dict[str, Any]:
    """Compute all cost metrics.

    Args:
        records_by_method: cost records of one long run per method.
        totals: optional per-method, per-M totals for the normalized table.
        min_cycles: the number of cycles fit_complexity requires.
        verbose: Activate verbose mode.

    Returns:
        Dictionary with the complexity metrics per method and, when totals are
        given, the normalized metrics.
    """
    complexity = {
        method: get_all_complexity_metrics(records, min_cycles, verbose=False)
        for method, records in records_by_method.items()
    }
    normalized = (
        get_all_normalized_metrics(totals, verbose) if totals is not None else {}
    )

    if verbose:
        print("**Finished Calculating All Metrics**")
        print("\n")
        for method, metrics in complexity.items():
            print(" Complexity Metrics: {} ".format(method).center(60, "="))
            for name, value in metrics.items():
                print("  {:<25} {:.4g}".format(METRIC_NAMES[name], value))
        if normalized:
            print_normalized_table(normalized)

    return {"complexity": complexity, "normalized": normalized}
