"""Rank heatmap tables and optional figures for a finished run directory."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .models import SITE_KINDS, parse_site_name
from .training import MetricsRecord

HEATMAP_FILE = "heatmap.csv"
METRICS_FILE = "metrics.jsonl"


class IncompleteRunError(RuntimeError):
    pass


def heatmap_rows(ranks: Mapping[str, int], kinds: Sequence[str] = SITE_KINDS) -> list[dict]:
    """One row per layer; cells hold final effective ranks, ``None`` where no adapter sits."""
    layers: dict[int, dict] = {}
    for site, rank in ranks.items():
        layer, kind = parse_site_name(site)
        if kind not in kinds:
            raise ValueError(f"site {site!r} has unknown kind {kind!r}")
        layers.setdefault(layer, {})[kind] = int(rank)
    n = max(layers) + 1 if layers else 0
    return [{"layer": i, **{k: layers.get(i, {}).get(k) for k in kinds}} for i in range(n)]


def write_heatmap(path, ranks: Mapping[str, int], kinds: Sequence[str] = SITE_KINDS) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", *kinds])
        for row in heatmap_rows(ranks, kinds):
            w.writerow([row["layer"], *("" if row[k] is None else row[k] for k in kinds)])
    return path


def read_heatmap(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if v != "" else None) for k, v in row.items()} for row in rows]


def heatmap_total(rows: Sequence[dict]) -> int:
    return sum(v for row in rows for k, v in row.items() if k != "layer" and v is not None)


def final_record(metrics: Sequence[MetricsRecord]) -> MetricsRecord:
    if not metrics or not metrics[-1].final:
        raise IncompleteRunError("run has no final metrics record")
    return metrics[-1]


def export_heatmap(run_dir, figures: bool = False) -> Path:
    """Write ``heatmap.csv`` (and ``heatmap.png``/``curves.png`` with ``figures``) into ``run_dir``."""
    from .checkpoint import read_metrics

    run_dir = Path(run_dir)
    metrics_path = run_dir / METRICS_FILE
    if not metrics_path.exists():
        raise IncompleteRunError(f"no {METRICS_FILE} in {run_dir}")
    metrics = read_metrics(metrics_path)
    rec = final_record(metrics)
    out = write_heatmap(run_dir / HEATMAP_FILE, rec.ranks)
    if figures:
        plot_heatmap(heatmap_rows(rec.ranks), run_dir / "heatmap.png")
        plot_curves(metrics, run_dir / "curves.png")
    return out


# -- figures ------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 9, "axes.labelsize": 9, "figure.dpi": 120})
    return plt


def plot_heatmap(rows: Sequence[dict], path, kinds: Sequence[str] = SITE_KINDS):
    plt = _pyplot()
    grid = np.array([[np.nan if r[k] is None else r[k] for r in rows] for k in kinds], dtype=float)
    fig, ax = plt.subplots(figsize=(max(3.0, 0.6 * len(rows) + 1.5), 2.6))
    im = ax.imshow(grid, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(rows)), [str(r["layer"]) for r in rows])
    ax.set_yticks(range(len(kinds)), list(kinds))
    ax.set_xlabel("layer")
    for (i, j), v in np.ndenumerate(grid):
        if not np.isnan(v):
            ax.text(j, i, f"{int(v)}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="final rank")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_curves(metrics: Sequence[MetricsRecord], path):
    plt = _pyplot()
    steps = [m.step for m in metrics]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(5, 4.5), sharex=True)
    top.semilogy(steps, [max(m.task_loss, 1e-300) for m in metrics], label="task")
    top.semilogy(steps, [max(m.orth_loss, 1e-300) for m in metrics], label="orth")
    top.set_ylabel("loss")
    top.legend(frameon=False)
    bottom.step(steps, [m.total_rank for m in metrics], where="post")
    bottom.set_ylabel("retained ranks")
    bottom.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
