"""Cross-run comparison tables and static plots.

Takes any number of finished run directories (manifest.json + history.json,
plus metrics_test.json from an eval) and emits a comparison table as CSV and
aligned text, a validation-metric-vs-round plot, and sweep plots whenever the
runs vary in the positive correction threshold or in warm-up epochs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigurationError

TABLE_COLUMNS = ("p_dice", "v_dice", "precision", "recall")


@dataclass
class RunSummary:
    name: str
    mode: str
    h1: float
    warmup: int
    cohort: dict[str, float]
    rounds: list[int]
    val_scores: list[float]
    val_metric: str


def load_run(run_dir: str | Path) -> RunSummary:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    history_path = run_dir / "history.json"
    metrics_path = run_dir / "metrics_test.json"
    for p in (manifest_path, history_path, metrics_path):
        if not p.exists():
            raise ConfigurationError(f"run directory {run_dir} is missing {p.name}")
    manifest = json.loads(manifest_path.read_text())
    history = json.loads(history_path.read_text())["history"]
    metrics = json.loads(metrics_path.read_text())
    policy = manifest["config"]["federation"]["policy"]
    return RunSummary(
        name=run_dir.name,
        mode=policy["mode"],
        h1=policy["h1"],
        warmup=policy["warmup_epochs"],
        cohort=metrics["cohort"],
        rounds=[h["round"] for h in history],
        val_scores=[h["val_score"] for h in history],
        val_metric=history[0]["val_metric"] if history else "v_dice",
    )


def write_table(runs: list[RunSummary], out_dir: Path) -> None:
    with open(out_dir / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "mode"] + list(TABLE_COLUMNS))
        for r in runs:
            w.writerow([r.name, r.mode] + [f"{r.cohort[c]:.4f}" for c in TABLE_COLUMNS])

    name_w = max(len("run"), max(len(r.name) for r in runs))
    mode_w = max(len("mode"), max(len(r.mode) for r in runs))
    lines = [
        f"{'run':<{name_w}}  {'mode':<{mode_w}}  " + "  ".join(f"{c:>9}" for c in TABLE_COLUMNS)
    ]
    for r in runs:
        cells = "  ".join(f"{r.cohort[c]:>9.4f}" for c in TABLE_COLUMNS)
        lines.append(f"{r.name:<{name_w}}  {r.mode:<{mode_w}}  {cells}")
    (out_dir / "comparison.txt").write_text("\n".join(lines) + "\n")


def plot_rounds(runs: list[RunSummary], out_dir: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for r in runs:
        ax.plot(r.rounds, r.val_scores, marker="o", markersize=3, label=r.name)
    ax.set_xlabel("round")
    ax.set_ylabel(f"validation {runs[0].val_metric}")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "metric_vs_round.png", dpi=120)
    plt.close(fig)


def _plot_sweep(points: list[tuple[float, float]], xlabel, ylabel, path: Path) -> None:
    points = sorted(points)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(run_dirs: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Build all report artifacts; returns the files written."""
    if not run_dirs:
        raise ConfigurationError("report needs at least one run directory")
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(runs, out)
    plot_rounds(runs, out)
    written = [out / "comparison.csv", out / "comparison.txt", out / "metric_vs_round.png"]

    if len({r.h1 for r in runs}) > 1:
        _plot_sweep([(r.h1, r.cohort["v_dice"]) for r in runs], "H1", "test v_dice",
                    out / "metric_vs_h1.png")
        written.append(out / "metric_vs_h1.png")
    if len({r.warmup for r in runs}) > 1:
        _plot_sweep([(r.warmup, r.cohort["p_dice"]) for r in runs], "warm-up epochs",
                    "test p_dice", out / "metric_vs_warmup.png")
        written.append(out / "metric_vs_warmup.png")
    return written
