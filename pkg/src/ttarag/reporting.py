"""Render run artifacts: delimited tables, plain-text summaries and figures.

Every report path writes machine-readable CSV plus a rendered PNG figure so
runs can be inspected without further tooling. Figures use the Agg backend;
no display is required.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import RunReport, SweepRow


def _domains_in_order(*reports: RunReport) -> list[str]:
    seen: dict[str, None] = {}
    for rep in reports:
        for dom in rep.per_domain:
            seen.setdefault(dom)
    return list(seen)


def write_answers(report: RunReport, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for ans in report.answers:
            rec = {
                "id": ans.query_id,
                "mode": ans.mode,
                "text": ans.text,
                "fallback": ans.fallback,
                "timings": {k: round(v, 6) for k, v in ans.timings.items()},
            }
            if ans.trace is not None:
                rec["pair_losses"] = [round(v, 6) for v in ans.trace.pair_losses]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def write_run_report(report: RunReport, out_dir, baseline: RunReport | None = None) -> dict[str, Path]:
    """report.csv (one row per domain + overall), report.txt, figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains = _domains_in_order(report)

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "queries", "accuracy", "delta_vs_naive", "total_s", "avg_s"])
        for dom in domains:
            st = report.per_domain[dom]
            delta = report.delta_vs_naive.get(dom)
            writer.writerow([dom, st.n, f"{st.accuracy:.1f}", _fmt_delta(delta), "", ""])
        writer.writerow(
            [
                "overall",
                report.n_queries,
                f"{report.overall_accuracy:.1f}",
                _fmt_delta(report.delta_vs_naive.get("overall")),
                f"{report.total_seconds:.2f}",
                f"{report.avg_seconds:.2f}",
            ]
        )

    txt_path = out / "report.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(render_text_table(report, baseline))

    fig_paths = {}
    fig_paths["accuracy"] = _accuracy_figure(report, baseline, out / "accuracy.png")
    if report.loss_trajectory:
        fig_paths["loss"] = _loss_figure(report.loss_trajectory, out / "adaptation_loss.png")
    return {"csv": csv_path, "txt": txt_path, **fig_paths}


def _fmt_delta(delta: float | None) -> str:
    return "" if delta is None else f"{delta:+.1f}"


def render_text_table(report: RunReport, baseline: RunReport | None = None) -> str:
    """Accuracy table: one column per domain plus overall, one row per system."""
    domains = _domains_in_order(report) + ["overall"]
    rows: list[tuple[str, list[str]]] = []

    def accs(rep: RunReport) -> list[str]:
        vals = [rep.per_domain[d].accuracy for d in domains[:-1]] + [rep.overall_accuracy]
        return [f"{v:.1f}" for v in vals]

    if baseline is not None:
        rows.append((baseline.mode, accs(baseline)))
    rows.append((report.mode, accs(report)))
    if report.delta_vs_naive:
        deltas = [report.delta_vs_naive.get(d) for d in domains]
        rows.append(("delta", [_fmt_delta(v) for v in deltas]))

    name_w = max(len(r[0]) for r in rows) + 2
    col_w = max(8, max(len(d) for d in domains) + 2)
    lines = [" " * name_w + "".join(d.rjust(col_w) for d in domains)]
    for name, cells in rows:
        lines.append(name.ljust(name_w) + "".join(c.rjust(col_w) for c in cells))
    lines.append("")
    lines.append(
        f"queries={report.n_queries} judge={report.judge_kind} "
        f"total={report.total_seconds:.2f}s avg={report.avg_seconds:.2f}s fallbacks={report.fallbacks}"
    )
    return "\n".join(lines) + "\n"


def _accuracy_figure(report: RunReport, baseline: RunReport | None, path: Path) -> Path:
    domains = _domains_in_order(report) + ["overall"]
    vals = [report.per_domain[d].accuracy for d in domains[:-1]] + [report.overall_accuracy]
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(domains)), 3.2))
    x = range(len(domains))
    if baseline is not None:
        base = [baseline.per_domain[d].accuracy if d in baseline.per_domain else 0.0 for d in domains[:-1]]
        base.append(baseline.overall_accuracy)
        ax.bar([i - 0.2 for i in x], base, width=0.4, label=baseline.mode, color="#999999")
        ax.bar([i + 0.2 for i in x], vals, width=0.4, label=report.mode, color="#2c7fb8")
    else:
        ax.bar(list(x), vals, width=0.6, label=report.mode, color="#2c7fb8")
    ax.set_xticks(list(x))
    ax.set_xticklabels(domains, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _loss_figure(trajectory: list[float], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(range(1, len(trajectory) + 1), trajectory, marker="o")
    ax.set_xlabel("adaptation example")
    ax.set_ylabel("mean loss")
    ax.set_xticks(range(1, len(trajectory) + 1))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_sweep(rows: list[SweepRow], axis: str, out_dir) -> dict[str, Path]:
    """sweep.csv with (setting, accuracy, avg seconds) and a rendered figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "accuracy", "avg_s"])
        for row in rows:
            writer.writerow([row.setting, f"{row.accuracy:.1f}", f"{row.avg_seconds:.3f}"])

    baseline = next((r for r in rows if r.value is None), None)
    points = [r for r in rows if r.value is not None]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    xs = [r.value for r in points]
    ax1.plot(xs, [r.accuracy for r in points], marker="o", label="adapted")
    if baseline is not None:
        ax1.axhline(baseline.accuracy, linestyle="--", color="#999999", label="naive")
    if axis == "learning_rate":
        ax1.set_xscale("log")
        ax2.set_xscale("log")
    ax1.set_xlabel(axis)
    ax1.set_ylabel("accuracy (%)")
    ax1.legend()
    ax2.plot(xs, [r.avg_seconds for r in points], marker="o", color="#d95f02")
    if baseline is not None:
        ax2.axhline(baseline.avg_seconds, linestyle="--", color="#999999")
    ax2.set_xlabel(axis)
    ax2.set_ylabel("avg seconds / query")
    fig.tight_layout()
    fig_path = out / "sweep.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "figure": fig_path}


def write_pretrain_curve(losses: list[float], held_out_loss: float, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "pretrain_loss.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            writer.writerow([i, f"{v:.6f}"])
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if losses:
        ax.plot(range(1, len(losses) + 1), losses, linewidth=0.8)
    ax.axhline(held_out_loss, linestyle="--", color="#d95f02", label=f"held-out {held_out_loss:.3f}")
    ax.set_xlabel("step")
    ax.set_ylabel("train loss")
    ax.legend()
    fig.tight_layout()
    fig_path = out / "pretrain_loss.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "figure": fig_path}


def write_ablation(reports: dict[str, RunReport], out_dir) -> dict[str, Path]:
    """Side-by-side accuracies for the segmentation ablation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "accuracy", "delta_vs_naive", "avg_s"])
        for mode, rep in reports.items():
            writer.writerow(
                [
                    mode,
                    f"{rep.overall_accuracy:.1f}",
                    _fmt_delta(rep.delta_vs_naive.get("overall")),
                    f"{rep.avg_seconds:.3f}",
                ]
            )
    txt_path = out / "ablation.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(f"{'mode':<10}{'accuracy':>10}{'delta':>8}\n")
        for mode, rep in reports.items():
            fh.write(
                f"{mode:<10}{rep.overall_accuracy:>10.1f}{_fmt_delta(rep.delta_vs_naive.get('overall')):>8}\n"
            )
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    modes = list(reports)
    ax.bar(modes, [reports[m].overall_accuracy for m in modes], color=["#2c7fb8", "#7fcdbb", "#999999"][: len(modes)])
    ax.set_ylabel("accuracy (%)")
    fig.tight_layout()
    fig_path = out / "ablation.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "txt": txt_path, "figure": fig_path}
