######################################################################################################
# FactorXLite - A factorization-centralization toolkit for rehearsal-free continual learning
# Copyright (C) 2025 FactorXLite contributors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program. If not, see <https://www.gnu.org/licenses/>.
######################################################################################################


import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.ticker import FuncFormatter


def create_percent_tick_formatter(max_decimals=1):
    """Tick formatter showing error rates (fractions) as percentages."""
    def percent_tick_formatter(value, pos):
        formatted = f"{value * 100:.{max_decimals}f}"
        if '.' in formatted:
            formatted = formatted.rstrip('0').rstrip('.')
        return f"{formatted}%"

    return percent_tick_formatter


def _matrix_array(matrix):
    values = np.full((len(matrix.rows), len(matrix.cols)), np.nan)
    for i, row in enumerate(matrix.rows):
        for j, col in enumerate(matrix.cols):
            value = matrix.get(row, col)
            if value is not None:
                values[i, j] = value
    return values


def plot_metrics_heatmap(matrix, title, save_file, figsize=(10, 5), cmap="viridis", annotate=True):
    """
    Heatmap of a model-snapshot x test-set error matrix, AVG appended as the last column.

    Parameters:
    -----------
    matrix : MetricsMatrix
        Rows are snapshots, columns test sets
    title : str
        Figure title
    save_file : str
        Output image path
    """
    values = _matrix_array(matrix)
    averages = np.array([[np.nan if matrix.avg(r) is None else matrix.avg(r)] for r in matrix.rows])
    values = np.hstack([values, averages]) if len(matrix.rows) else values
    cols = list(matrix.cols) + ["AVG"]

    fig, ax = plt.subplots(figsize=figsize)
    image = ax.imshow(values, aspect="auto", cmap=cmap)
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.rows)))
    ax.set_yticklabels(matrix.rows)
    ax.set_title(title)
    if annotate:
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                if not np.isnan(values[i, j]):
                    ax.text(j, i, f"{values[i, j] * 100:.1f}", ha="center", va="center", color="w", fontsize=7)
    colorbar = fig.colorbar(image, ax=ax)
    colorbar.ax.yaxis.set_major_formatter(FuncFormatter(create_percent_tick_formatter()))
    fig.tight_layout()
    fig.savefig(save_file, dpi=150)
    plt.close(fig)
    return save_file


def plot_average_comparison(rows, save_file, figsize=(8, 4)):
    """
    Grouped bars of forward and backward AVG per method row.

    Parameters:
    -----------
    rows : list of tuple
        (label, forward_avg, backward_avg); None averages are drawn as missing
    """
    labels = [r[0] for r in rows]
    forward = [np.nan if r[1] is None else r[1] for r in rows]
    backward = [np.nan if r[2] is None else r[2] for r in rows]
    x = np.arange(len(rows))
    width = 0.4

    fig, ax = plt.subplots(figsize=figsize)
    ax.bar(x - width / 2, forward, width, label="Forward AVG")
    ax.bar(x + width / 2, backward, width, label="Backward AVG")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("Token error rate")
    ax.yaxis.set_major_formatter(FuncFormatter(create_percent_tick_formatter()))
    ax.grid(True, axis="y", which="major", linestyle="--", alpha=0.5)
    ax.legend()
    fig.tight_layout()
    fig.savefig(save_file, dpi=150)
    plt.close(fig)
    return save_file


def create_factorx_report_plots(reports, save_path, file_name="comparison"):
    """
    Write one heatmap pair per report and an AVG comparison chart.

    Returns:
    --------
    list of str
        Paths of the written images
    """
    os.makedirs(save_path, exist_ok=True)
    written = []
    summary = []
    for label, report in reports:
        for kind, matrix in (("forward", report.forward), ("backward", report.backward)):
            written.append(plot_metrics_heatmap(
                matrix, f"{label}: {kind} evaluation",
                os.path.join(save_path, f"{file_name}_{label}_{kind}.png"),
            ))
        final = report.forward.rows[-1]
        summary.append((label, report.forward.avg(final), report.backward.avg(final)))
    written.append(plot_average_comparison(summary, os.path.join(save_path, f"{file_name}_avg.png")))
    return written
