"""
Campaigns over policy grids: run, validate, bench and compare.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple
from argparse import Namespace
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
import json
import logging

import matplotlib.pyplot as plt
from tqdm import tqdm

from minseek_toolbox.config import RunConfig
from minseek_toolbox.controller import (
    GenerationSession,
    Method,
    SampledSource,
    ScalingPolicy,
    check_static_bound,
    required_context,
)
from minseek_toolbox.data import constant_script
from minseek_toolbox.metrics import (
    get_all_metrics,
    get_all_normalized_metrics,
    print_normalized_table,
)
from minseek_toolbox.metrics_complexity import cumulative_cost, per_cycle_cost
from minseek_toolbox.model import ModelConfig, Weights, init_weights, make_rng
from minseek_toolbox.oracle import OracleObserver
from minseek_toolbox.viz import (
    plot_cumulative_cost,
    plot_normalized_time,
    save_figure,
    write_plot_data,
)

logger = logging.getLogger(__name__)


def map_cells(
    fn: Callable,
    cells: Sequence,
    workers: int = 1,
    verbose: bool = True,
) -> List:
    """Apply fn to every grid cell, in order, optionally on a thread pool.

    Cells share only the immutable weights; each builds its own cache and rng.
    """
    if workers <= 1:
        progress = tqdm(cells) if verbose else cells
        return [fn(cell) for cell in progress]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = executor.map(fn, cells)
        if verbose:
            results = tqdm(results, total=len(cells))
        return list(results)


def _source(config: RunConfig, model: ModelConfig):
    if config.script is not None:
        return config.script.source(model)
    return SampledSource(config.sampling, make_rng(config.seed))


def _check_grid(policies: Sequence[ScalingPolicy], model: ModelConfig) -> None:
    for policy in policies:
        check_static_bound(policy, model)


def run_cell(
    weights: Weights,
    policy: ScalingPolicy,
    prompt: Sequence[int],
    source,
    checked: bool = False,
    observer=None,
    fault: Optional[str] = None,
) -> GenerationSession:
    session = GenerationSession(
        weights, policy, source, checked=checked, observer=observer, fault=fault
    )
    session.run(prompt)
    return session


def cmd_run(
    config: RunConfig,
    trace_out: Optional[Path] = None,
    verbose: bool = True,
) -> List[Namespace]:
    """Run every (policy, prompt) cell and write its trace and transcript.

    Args:
        config: the run configuration.
        trace_out: trace file for a single-cell run, or a directory.
        verbose: Activate verbose mode.

    Returns:
        One Namespace per cell with policy, prompt index, written paths and the
        terminal reason.
    """
    policies = config.policies()
    _check_grid(policies, config.model)
    weights = init_weights(config.model, config.seed)
    prompts = config.prompt_list()
    cells = [(p, i, prompt) for p in policies for i, prompt in enumerate(prompts)]

    single_file = trace_out is not None and len(cells) == 1 and Path(trace_out).suffix
    if trace_out is not None and not single_file:
        out_dir = Path(trace_out)
    else:
        out_dir = config.output_dir / "traces"

    def run_one(cell):
        policy, index, prompt = cell
        session = run_cell(
            weights, policy, prompt, _source(config, config.model), checked=config.checked
        )
        name = f"{policy.label}_p{index}"
        trace_path = Path(trace_out) if single_file else out_dir / f"{name}.jsonl"
        session.trace.write(trace_path)
        transcript_path = trace_path.with_suffix(".tokens.json")
        transcript = session.transcript
        transcript_path.write_text(
            json.dumps(
                {
                    "tokens": transcript.tokens,
                    "injections": transcript.injections,
                    "answer_start": transcript.answer_start,
                }
            )
            + "\n"
        )
        terminal = session.trace.terminal
        return Namespace(
            policy=policy,
            prompt_index=index,
            trace_path=trace_path,
            transcript_path=transcript_path,
            reason=terminal.get("reason") if terminal else None,
            rc_count=session.state.rc_count,
            tokens_generated=session.state.tokens_generated,
        )

    results = map_cells(run_one, cells, config.workers, verbose)
    if verbose:
        print(" Runs ".center(60, "="))
        for r in results:
            print(
                "  {:<22} p{}  {:<10} cycles {:>4}  tokens {:>6}".format(
                    r.policy.label, r.prompt_index, r.reason, r.rc_count, r.tokens_generated
                )
            )
    return results


def cmd_validate(
    config: RunConfig,
    fault: Optional[str] = None,
    verbose: bool = True,
) -> Namespace:
    """Check every cell against the recompute oracle at every boundary.

    Runs in checked mode. A cell passes when every injected token's
    incremental logits agree with the recomputation of the surviving tokens.

    Returns:
        A Namespace with passed and one report per cell (policy, prompt index,
        boundaries, per-boundary deviations, max deviation and the first
        failing boundary). Verbose output lists every boundary.
    """
    policies = config.policies()
    _check_grid(policies, config.model)
    weights = init_weights(config.model, config.seed)
    prompts = config.prompt_list()
    cells = [(p, i, prompt) for p in policies for i, prompt in enumerate(prompts)]

    def validate_one(cell):
        policy, index, prompt = cell
        observer = OracleObserver()
        run_cell(
            weights,
            policy,
            prompt,
            _source(config, config.model),
            checked=True,
            observer=observer,
            fault=fault,
        )
        return Namespace(
            policy=policy,
            prompt_index=index,
            boundaries=observer.boundaries,
            deviations=[b.deviation for b in observer.boundaries],
            max_deviation=observer.max_deviation,
            first_failure=observer.first_failure,
            passed=observer.passed,
        )

    reports = map_cells(validate_one, cells, config.workers, verbose)
    passed = all(r.passed for r in reports)
    if verbose:
        print(" Oracle Validation ".center(60, "="))
        for r in reports:
            status = "pass" if r.passed else "FAIL"
            print(
                "  {:<22} p{}  {}  boundaries {:>4}  max deviation {:.3g}".format(
                    r.policy.label, r.prompt_index, status, len(r.boundaries), r.max_deviation
                )
            )
            for b in r.boundaries:
                print(
                    "     boundary {:>3}  cycle {:>3}  {:<10}  rows {:>4}  "
                    "deviation {:.3g}{}".format(
                        b.index,
                        b.rc_count,
                        b.phase,
                        b.rows,
                        b.deviation,
                        "" if b.full_deviation is not None else "  (stored rows)",
                    )
                )
            if r.first_failure is not None:
                f = r.first_failure
                print(
                    "     first failure at boundary {} (cycle {}, {} rows)".format(
                        f.index, f.rc_count, f.rows
                    )
                )
    return Namespace(passed=passed, reports=reports)


def _save_figures(stem: Path, figure_ext: Sequence[str]) -> List[Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_figure(stem, list(figure_ext))
    plt.close("all")
    return [stem.with_suffix("." + ext) for ext in figure_ext]


def _bench_model(model: ModelConfig, policies: Sequence[ScalingPolicy]) -> ModelConfig:
    needed = max(required_context(p)[0] for p in policies)
    if needed < model.max_context_length:
        return model
    return replace(model, max_context_length=needed + 1)


def _scripted_session(
    weights: Weights,
    policy: ScalingPolicy,
    prompt: Sequence[int],
    thought_len: int,
) -> GenerationSession:
    if policy.effective_max_rc is None:
        n_cycles = policy.token_limit // max(1, thought_len) + 1
    else:
        n_cycles = policy.effective_max_rc
    config = weights.config
    source = constant_script(
        n_cycles, thought_len, sentinels=config.sentinel_tokens, vocab_size=config.vocab_size
    )
    return run_cell(weights, policy, prompt, source)


def cmd_bench(
    config: RunConfig,
    figure_ext: Optional[Sequence[str]] = None,
    verbose: bool = True,
) -> Namespace:
    """Long scripted runs per method with constant thought length.

    Each method of the grid runs bench.cycles cycles of bench.thought_len
    tokens. The model's context is widened when a method needs more positions
    than the configured model offers; the weights do not depend on it.

    Args:
        config: the run configuration.
        figure_ext: also save a cost figure in each of these formats.
        verbose: Activate verbose mode.

    Returns:
        A Namespace with the cost records per method, the metrics and the
        written plot-data files.
    """
    bench = config.bench
    policies = [
        replace(p, max_rc=bench.cycles)
        for p in config.grid.policies(config.policy)
        if p.method is not Method.STANDARD
    ]
    policies = list(dict.fromkeys(policies))
    model = _bench_model(config.model, policies)
    weights = init_weights(model, config.seed)
    prompt = config.prompt_list()[0]

    sessions = map_cells(
        lambda p: _scripted_session(weights, p, prompt, bench.thought_len),
        policies,
        config.workers,
        verbose,
    )
    records = {p.label: s.trace.costs for p, s in zip(policies, sessions)}
    metrics = get_all_metrics(records, min_cycles=min(bench.cycles, 20), verbose=verbose)

    files = []
    data_dir = config.output_dir / "plot_data"
    for label, recs in records.items():
        curve = cumulative_cost(recs)
        files.append(
            write_plot_data(
                data_dir / f"{label}_cumulative_cost.dat",
                curve.tokens,
                curve.attention_scores,
            )
        )
        cycles = per_cycle_cost(recs)
        files.append(
            write_plot_data(
                data_dir / f"{label}_cost_per_cycle.dat",
                list(cycles.keys()),
                list(cycles.values()),
            )
        )
    if figure_ext:
        plot_cumulative_cost(records)
        stem = config.output_dir / "figures" / "cumulative_cost"
        files.extend(_save_figures(stem, figure_ext))
    return Namespace(records=records, metrics=metrics, files=files, sessions=sessions)


def cmd_compare(
    config: RunConfig,
    figure_ext: Optional[Sequence[str]] = None,
    verbose: bool = True,
) -> Namespace:
    """Normalized computation per method over the compare grid of M values.

    Totals of attention scores and wall time are divided by the method's
    M = 0 run, so standard generation scores exactly 1.

    Args:
        config: the run configuration.
        figure_ext: also save one figure per quantity in each of these formats.
        verbose: Activate verbose mode.

    Returns:
        A Namespace with the raw totals, the normalized metrics and the
        written plot-data files.
    """
    bench = config.bench
    grid_m = list(bench.compare_max_rc)
    if 0 not in grid_m:
        grid_m = [0] + grid_m
    base = [p for p in config.grid.policies(config.policy) if p.method is not Method.STANDARD]
    base = list(dict.fromkeys(replace(p, max_rc=0) for p in base))
    cells: List[Tuple[str, ScalingPolicy]] = [
        (p.label.rsplit("-m", 1)[0], replace(p, max_rc=m)) for p in base for m in grid_m
    ]
    model = _bench_model(config.model, [c[1] for c in cells])
    weights = init_weights(model, config.seed)
    prompt = config.prompt_list()[0]

    sessions = map_cells(
        lambda cell: _scripted_session(weights, cell[1], prompt, bench.thought_len),
        cells,
        config.workers,
        verbose,
    )
    totals: Dict[str, Dict[Optional[int], Dict[str, float]]] = {}
    for (name, policy), session in zip(cells, sessions):
        costs = session.trace.costs
        totals.setdefault(name, {})[policy.max_rc] = {
            "attention_scores": float(sum(c.attention_scores for c in costs)),
            "wall_time": float(sum(c.wall_time for c in costs)),
        }

    normalized = get_all_normalized_metrics(totals, verbose=verbose)
    if verbose:
        print_normalized_table(normalized)

    files = []
    data_dir = config.output_dir / "plot_data"
    for name, quantities in normalized.items():
        for quantity, metrics in quantities.items():
            bounded = [m for m in metrics if m.max_rc is not None]
            files.append(
                write_plot_data(
                    data_dir / f"{name}_normalized_{quantity}.dat",
                    [m.max_rc for m in bounded],
                    [m.normalized for m in bounded],
                )
            )
    if figure_ext:
        for quantity in ("attention_scores", "wall_time"):
            plot_normalized_time({name: q[quantity] for name, q in normalized.items()})
            stem = config.output_dir / "figures" / f"normalized_{quantity}"
            files.extend(_save_figures(stem, figure_ext))
    return Namespace(totals=totals, normalized=normalized, files=files)
