"""
Visualizations and figure-data files for decoding cost.
"""
from typing import Mapping, NoReturn, Sequence, Union
from pathlib import Path

import numpy as np
import matplotlib
import matplotlib.pyplot as plt

from minseek_toolbox.metrics_complexity import CostRecord, cumulative_cost
from minseek_toolbox.metrics_normalized import NormalizedMetric


def write_plot_data(
    path: Union[str, Path],
    x: Sequence[float],
    y: Sequence[float],
) -> Path:
    """Write a two-column, whitespace-separated data file with an "x y" header."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be flat arrays of the same length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x y"] + ["{:.12g} {:.12g}".format(a, b) for a, b in zip(x, y)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_plot_data(path: Union[str, Path]) -> np.ndarray:
    """Read a file written by write_plot_data into an (n, 2) array."""
    return np.loadtxt(path, skiprows=1, ndmin=2)


def plot_cumulative_cost(
    records_by_method: Mapping[str, Sequence[CostRecord]],
    ax: Union[matplotlib.axes.Axes, None] = None,
) -> matplotlib.axes.Axes:
    """Plot cumulative attention scores against cumulative tokens per method.

    Args:
        records_by_method: cost records of one run per method.
        ax: matplotlib.axes.Axes object.

    Returns:
        matplotlib.axes.Axes object with plot added.
    """
    # Create ax if it doesn't exist
    if ax is None:
        fig, ax = plt.subplots(figsize=(5, 5))

    for method, records in records_by_method.items():
        curve = cumulative_cost(records)
        ax.plot(curve.tokens, curve.attention_scores, "-", linewidth=2, label=method)

    ax.set_xlabel("Generated tokens")
    ax.set_ylabel("Cumulative attention scores")
    ax.set_title("Decoding Cost")
    ax.legend(loc="upper left")
    return ax


def plot_normalized_time(
    normalized: Mapping[str, Sequence[NormalizedMetric]],
    ax: Union[matplotlib.axes.Axes, None] = None,
) -> matplotlib.axes.Axes:
    """Bar plot of normalized computation per method and M.

    Args:
        normalized: method -> normalized metrics in M order.
        ax: matplotlib.axes.Axes object.

    Returns:
        matplotlib.axes.Axes object with plot added.
    """
    if ax is None:
        fig, ax = plt.subplots(figsize=(5, 5))

    methods = list(normalized)
    labels = ["inf" if m.max_rc is None else str(m.max_rc) for m in normalized[methods[0]]]
    width = 0.8 / len(methods)
    base = np.arange(len(labels))
    for i, method in enumerate(methods):
        values = [m.normalized for m in normalized[method]]
        ax.bar(base + i * width, values, width, label=method)

    ax.axhline(1.0, color="k", linewidth=1, linestyle="--")
    ax.set_xticks(base + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_xlabel("M")
    ax.set_ylabel("Normalized computation")
    ax.set_title("Normalized Computation Time")
    ax.legend(loc="upper left")
    return ax


def save_figure(
    file_name: str = "figure",
    ext_list: Union[list, str, None] = None,
    white_background: bool = True,
) -> NoReturn:
    """Save matplotlib figure for all extensions in ext_list.

    Args:
        file_name: name of saved image file.
        ext_list: list of strings (or single string) denoting file type.
        white_background: set background of image to white if True.
    """

    # Default ext_list
    if ext_list is None:
        ext_list = ["pdf", "png"]

    # If ext_list is a single str
    if isinstance(ext_list, str):
        ext_list = [ext_list]

    # Set facecolor and edgecolor
    (fc, ec) = ("w", "w") if white_background else ("none", "none")

    # Save each type in ext_list
    for ext in ext_list:
        save_str = str(file_name) + "." + ext
        plt.savefig(save_str, bbox_inches="tight", facecolor=fc, edgecolor=ec)
        print(f"Saved figure {save_str}")
