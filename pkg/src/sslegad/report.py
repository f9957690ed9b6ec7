"""Cross-run comparison: one CSV row per run plus rendered figures.

The delimited table is the contract; the figures (validation DSC per round,
final test metrics by strategy, and the selection-score audit when a
two-stage run is present) are written next to it for quick inspection.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import DataError

REPORT_CSV_HEADER = "strategy,labeled_pct,final_dsc,final_hd,seed"

_STRATEGY_COLORS = {
    "egad": "tab:blue",
    "entropy": "tab:orange",
    "random": "tab:green",
    "supervised": "tab:red",
}


@dataclass
class RunResult:
    run_dir: Path
    strategy: str
    seed: int
    labeled_pct: float
    final_dsc: float
    final_hd: float
    val_dsc_by_round: List[float]
    scores_csv: Path

    def csv_row(self) -> str:
        return ",".join([self.strategy, repr(self.labeled_pct),
                         repr(self.final_dsc), repr(self.final_hd),
                         str(self.seed)])


def collect_run(run_dir: Union[str, Path]) -> RunResult:
    run = Path(run_dir)
    try:
        cfg = json.loads((run / "config.json").read_text())
        history = json.loads((run / "history.json").read_text())
        metric_rows = list(csv.DictReader((run / "metrics.csv").open()))
    except FileNotFoundError as e:
        raise DataError(f"{run}: not a completed run directory ({e.filename} missing)") from None
    test_rows = [r for r in metric_rows if r["split"] == "test"]
    if not test_rows:
        raise DataError(f"{run}: metrics.csv has no test row")
    final = test_rows[-1]
    val_rows = [r for r in metric_rows if r["split"] == "val"]
    labeled_pct = 100.0 * len(history["final_labeled"]) / cfg["data"]["n_train"]
    return RunResult(
        run_dir=run,
        strategy=cfg["al"]["strategy"],
        seed=int(cfg["seeds"]["master"]),
        labeled_pct=labeled_pct,
        final_dsc=float(final["dsc_mean"]),
        final_hd=float(final["hd_mean"]),
        val_dsc_by_round=[float(r["dsc_mean"]) for r in val_rows],
        scores_csv=run / "scores.csv",
    )


def write_report(results: Sequence[RunResult], out_csv: Union[str, Path]) -> List[str]:
    """Rows sorted by (strategy, seed); returns the written data rows."""
    ordered = sorted(results, key=lambda r: (r.strategy, r.seed))
    rows = [r.csv_row() for r in ordered]
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join([REPORT_CSV_HEADER] + rows) + "\n")
    return rows


def aggregate_by_strategy(results: Sequence[RunResult]) -> Dict[str, Dict[str, float]]:
    groups: Dict[str, List[RunResult]] = {}
    for r in results:
        groups.setdefault(r.strategy, []).append(r)
    return {
        name: {
            "n": float(len(rs)),
            "dsc_mean": sum(x.final_dsc for x in rs) / len(rs),
            "hd_mean": sum(x.final_hd for x in rs) / len(rs),
        }
        for name, rs in groups.items()
    }


# ---------------------------------------------------------------------------
# figures


def _color(strategy: str) -> str:
    return _STRATEGY_COLORS.get(strategy, "tab:gray")


def render_figures(results: Sequence[RunResult], outdir: Union[str, Path]) -> List[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        _fig_dsc_by_round(results, out / "report_dsc_by_round.png"),
        _fig_final_comparison(results, out / "report_final_metrics.png"),
    ]
    scores = _fig_selection_scores(results, out / "report_selection_scores.png")
    if scores is not None:
        written.append(scores)
    return written


def _fig_dsc_by_round(results: Sequence[RunResult], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    seen = set()
    for r in results:
        rounds = range(1, len(r.val_dsc_by_round) + 1)
        label = r.strategy if r.strategy not in seen else None
        seen.add(r.strategy)
        ax.plot(list(rounds), r.val_dsc_by_round, marker="o", alpha=0.7,
                color=_color(r.strategy), label=label)
    ax.set_xlabel("annotation round")
    ax.set_ylabel("best validation DSC (%)")
    ax.set_title("Validation DSC per round")
    ax.grid(alpha=0.3)
    if seen:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_final_comparison(results: Sequence[RunResult], path: Path) -> Path:
    agg = aggregate_by_strategy(results)
    strategies = sorted(agg)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    xs = range(len(strategies))
    for ax, key, title in ((ax1, "final_dsc", "final test DSC (%)"),
                           (ax2, "final_hd", "final test HD (px)")):
        means = [agg[s]["dsc_mean" if key == "final_dsc" else "hd_mean"]
                 for s in strategies]
        ax.bar(xs, means, color=[_color(s) for s in strategies], alpha=0.6)
        for i, s in enumerate(strategies):
            pts = [getattr(r, key) for r in results if r.strategy == s]
            ax.plot([i] * len(pts), pts, "k.", ms=8)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(strategies, rotation=20)
        ax.set_title(title)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_selection_scores(results: Sequence[RunResult], path: Path) -> Optional[Path]:
    source = next((r for r in results
                   if r.strategy == "egad" and r.scores_csv.exists()), None)
    if source is None:
        return None
    rows = list(csv.DictReader(source.scores_csv.open()))
    rows = [r for r in rows if r["cos_norm"] != ""]
    if not rows:
        return None
    last_round = max(int(r["round"]) for r in rows)
    rows = [r for r in rows if int(r["round"]) == last_round]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for picked, marker, label in ((False, "o", "survivor"),
                                  (True, "*", "selected")):
        xs = [float(r["mi_norm"]) for r in rows if (r["selected"] == "1") == picked]
        ys = [float(r["cos_norm"]) for r in rows if (r["selected"] == "1") == picked]
        ax.scatter(xs, ys, marker=marker, s=140 if picked else 40,
                   color="tab:red" if picked else "tab:blue", label=label,
                   zorder=3 if picked else 2)
    ax.set_xlabel("normalized mutual information (dependence)")
    ax.set_ylabel("normalized cosine similarity (agreement)")
    ax.set_title(f"Stage-2 selection scores, round {last_round}\n({source.run_dir.name})")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
