"""Per-fold strategy grids: three level rows by eight operation columns."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .fusion import OPERATIONS, FusionStrategy  # noqa: E402

ROW_ORDER = ("target", "deep", "raw")


class PlotError(RuntimeError):
    pass


def _draw_group(ax, strategy: FusionStrategy, title: str) -> None:
    n_rows, n_cols = len(ROW_ORDER), len(OPERATIONS)
    for r, level in enumerate(ROW_ORDER):
        y = n_rows - 1 - r
        for c, op in enumerate(OPERATIONS):
            chosen = strategy.ops[level] == op
            best = chosen and level == strategy.selected_level
            face = "#d62728" if best else ("#4c72b0" if chosen else "white")
            ax.add_patch(Rectangle((c, y), 1, 1, facecolor=face, edgecolor="#444444", linewidth=0.6))
    ax.set_xlim(0, n_cols)
    ax.set_ylim(0, n_rows)
    ax.set_aspect("equal")
    ax.set_xticks([c + 0.5 for c in range(n_cols)])
    ax.set_xticklabels(OPERATIONS, rotation=90, fontsize=6)
    ax.set_yticks([n_rows - 1 - r + 0.5 for r in range(n_rows)])
    ax.set_yticklabels(ROW_ORDER, fontsize=7)
    ax.tick_params(length=0)
    ax.set_title(title, fontsize=8)


def render_strategy_grid(results: list[dict], columns: int = 5):
    """Figure with one 3x8 group per fold result; selected cells are filled, the best level in red.

    ``results`` are fold entries as written to ``search.json`` (each holding a
    ``strategy`` mapping and a ``fold`` index).
    """
    if not results:
        raise PlotError("no fold results to plot")
    strategies = [FusionStrategy.from_dict(r["strategy"]) for r in results]
    n = len(strategies)
    cols = min(columns, n)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.2 * rows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        if i < n:
            _draw_group(ax, strategies[i], f"fold {results[i].get('fold', i)}")
        else:
            ax.set_axis_off()
    fig.tight_layout()
    return fig


def export_strategy_grid(results: list[dict], out_path, columns: int = 5) -> Path:
    """Write :func:`render_strategy_grid` to ``out_path``. SVG output is byte-stable."""
    fig = render_strategy_grid(results, columns)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with matplotlib.rc_context({"svg.hashsalt": "mfas", "svg.fonttype": "path"}):
            fig.savefig(out_path, metadata={"Date": None} if out_path.suffix in (".svg", ".pdf") else None)
    except OSError as exc:
        raise PlotError(f"cannot write {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
    return out_path
