"""SVG figures of values and switching regions."""

from __future__ import annotations

import math
from pathlib import Path

from matplotlib.axes import Axes
from matplotlib.figure import Figure
import numpy as np
from numpy.typing import NDArray

from .bellman import ValueSurface
from .strategy import CONTINUE, StrategyTable, boundary_curve

GOLDEN_RATIO = (math.sqrt(5) - 1.0) / 2.0


def _figure(columns: int = 1, width: float = 6.0) -> tuple[Figure, list[Axes]]:
    fig = Figure(figsize=(width * columns, width * GOLDEN_RATIO), facecolor="w")
    axes = [fig.add_subplot(1, columns, k + 1) for k in range(columns)]
    return fig, axes


def _ternary(points: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    # vertex e_1 at (0, 0), e_2 at (1, 0), e_3 at (1/2, sqrt(3)/2)
    x = points[:, 1] + 0.5 * points[:, 2]
    y = points[:, 2] * math.sqrt(3.0) / 2.0
    return x, y


def _simplex_frame(ax: Axes, states: tuple[str, ...]) -> None:
    h = math.sqrt(3.0) / 2.0
    ax.plot([0.0, 1.0, 0.5, 0.0], [0.0, 0.0, h, 0.0], color="black", linewidth=0.8)
    for (x, y), label in zip([(-0.04, -0.04), (1.04, -0.04), (0.5, h + 0.03)], states):
        ax.text(x, y, label, ha="center", va="center")
    ax.set_aspect("equal")
    ax.set_axis_off()


def plot_boundaries(table: StrategyTable, path: Path) -> None:
    """Two states: pi_1 extent of every switching region against time to maturity."""
    model = table.surface.model
    fig, (ax,) = _figure()
    for a in range(model.n_policies):
        for b in range(model.n_policies):
            if a == b:
                continue
            edges = boundary_curve(table, a, b)
            tau = np.array([e.tau for e in edges])
            lower = np.array([np.nan if e.empty else e.lower for e in edges], dtype=float)
            upper = np.array([np.nan if e.empty else e.upper for e in edges], dtype=float)
            if np.all(np.isnan(lower)):
                continue
            label = f"{model.policies[a]} → {model.policies[b]}"
            (line,) = ax.plot(tau, upper, label=f"{label} (upper)")
            ax.plot(tau, lower, linestyle="--", color=line.get_color(), label=f"{label} (lower)")
    ax.set_xlabel("time to maturity")
    ax.set_ylabel(f"P({model.states[0]})")
    ax.set_ylim(-0.02, 1.02)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize="small")
    fig.savefig(path, format="svg", bbox_inches="tight")


def plot_regions(table: StrategyTable, path: Path, layer: int = -1) -> None:
    """Region map on one layer.

    Two states give boundary curves over pi_1; three or more give a ternary map per policy.
    """
    surface = table.surface
    model = surface.model
    if model.m == 2:
        plot_boundaries(table, path)
        return
    fig, axes = _figure(model.n_policies, width=4.0)
    x, y = _ternary(surface.lattice.points[:, :3])
    actions = table.actions[layer]
    for a, ax in enumerate(axes):
        _simplex_frame(ax, model.states[:3])
        for target in [CONTINUE, *range(model.n_policies)]:
            mask = actions[:, a] == target
            if target == a or not mask.any():
                continue
            label = "continue" if target == CONTINUE else f"switch to {model.policies[target]}"
            ax.scatter(x[mask], y[mask], s=4, label=label)
        ax.set_title(f"policy {model.policies[a]}")
        ax.legend(fontsize="x-small", loc="upper right")
    fig.savefig(path, format="svg", bbox_inches="tight")


def plot_values(surface: ValueSurface, path: Path, layer: int = -1) -> None:
    """Value per policy on one layer, as curves over pi_1 or as ternary heat maps."""
    model = surface.model
    values = surface.values[layer]
    points = surface.lattice.points
    if model.m == 2:
        fig, (ax,) = _figure()
        for a, label in enumerate(model.policies):
            ax.plot(points[:, 0], values[:, a], label=f"policy {label}")
        ax.set_xlabel(f"P({model.states[0]})")
        ax.set_ylabel("value")
        ax.legend(fontsize="small")
    else:
        fig, axes = _figure(model.n_policies, width=4.0)
        x, y = _ternary(points[:, :3])
        for a, ax in enumerate(axes):
            _simplex_frame(ax, model.states[:3])
            cells = ax.scatter(x, y, c=values[:, a], s=4, cmap="viridis")
            fig.colorbar(cells, ax=ax, shrink=0.7)
            ax.set_title(f"policy {model.policies[a]}")
    fig.savefig(path, format="svg", bbox_inches="tight")
