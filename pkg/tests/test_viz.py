"""
Tests for visualizations.
"""

import pytest
import numpy as np
import matplotlib
import matplotlib.pyplot as plt

from minseek_toolbox.metrics_complexity import CostRecord
from minseek_toolbox.metrics_normalized import normalize
from minseek_toolbox.viz import (
    plot_cumulative_cost,
    plot_normalized_time,
    read_plot_data,
    save_figure,
    write_plot_data,
)


@pytest.fixture
def get_test_records():
    linear = [CostRecord(16, 1, 0.001, i + 1) for i in range(10)]
    growing = [CostRecord(16 * (i + 1), i + 1, 0.001, i + 1) for i in range(10)]
    return {"minseek-v2-m4": linear, "budget-m4": growing}


@pytest.fixture
def get_fig_ax():
    fig, ax = plt.subplots(1, 1, figsize=(5, 5))
    return fig, ax


def test_plot_cumulative_cost_returns(get_test_records, get_fig_ax):
    """Test if plot_cumulative_cost returns correct type."""
    fig, ax = get_fig_ax
    ax = plot_cumulative_cost(get_test_records, ax=ax)
    assert isinstance(ax, matplotlib.axes.Axes)
    assert len(ax.get_lines()) == 2


def test_plot_normalized_time_returns(get_fig_ax):
    """Test if plot_normalized_time returns correct type."""
    normalized = {
        "minseek-v2": normalize({0: 1.0, 10: 1.1, 20: 1.069}),
        "budget": normalize({0: 1.0, 10: 3.0, 20: 7.5}),
    }
    fig, ax = get_fig_ax
    ax = plot_normalized_time(normalized, ax=ax)
    assert isinstance(ax, matplotlib.axes.Axes)
    assert [t.get_text() for t in ax.get_xticklabels()] == ["0", "10", "20"]


def test_plot_creates_axes(get_test_records):
    ax = plot_cumulative_cost(get_test_records)
    assert isinstance(ax, matplotlib.axes.Axes)
    plt.close("all")


def test_write_and_read_plot_data(tmp_path):
    """Test the two-column data file format."""
    path = write_plot_data(tmp_path / "data" / "cost.dat", [1, 2, 3], [16, 48.5, 96])
    assert path.read_text() == "x y\n1 16\n2 48.5\n3 96\n"
    data = read_plot_data(path)
    assert data.shape == (3, 2)
    assert np.array_equal(data[:, 1], [16, 48.5, 96])


def test_write_plot_data_rejects_mismatch(tmp_path):
    with pytest.raises(ValueError):
        write_plot_data(tmp_path / "bad.dat", [1, 2], [1])


def test_save_figure(get_test_records, tmp_path):
    plot_cumulative_cost(get_test_records)
    save_figure(tmp_path / "cost", "png")
    assert (tmp_path / "cost.png").exists()
    plt.close("all")
