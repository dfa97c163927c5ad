"""Aggregate evaluation rows into per-figure tables and rendered figures.

Each evaluation axis gets a delimited table plus a PNG rendered next to
it: accuracy against the particle budget, KL divergence against the
particle budget, and accuracy over episode progress.  The report also
prints the compute accounting: policy evaluations per method and the
reduction relative to exact enumeration.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_METHOD_STYLE = {
    "exact": dict(color="black", marker="s", label="exact enumeration"),
    "ours": dict(color="tab:blue", marker="o", label="amortized (learned proposal)"),
    "ours_no_nn": dict(color="tab:orange", marker="^", label="amortized (uniform proposal)"),
    "tomnet": dict(color="tab:green", marker="x", label="end-to-end net"),
}


def read_eval_rows(paths: Sequence[str | Path]) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rec["particle_fraction"] = float(rec["particle_fraction"])
                rec["value"] = float(rec["value"])
                rec["stderr"] = float(rec["stderr"])
                rec["n_episodes"] = int(rec["n_episodes"])
                rec["policy_evals"] = int(rec.get("policy_evals", 0) or 0)
                rec["bucket"] = int(rec.get("bucket", -1) or -1)
                rows.append(rec)
    return rows


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _vs_fraction_table(rows: list[dict], metric: str) -> list[list]:
    table = []
    for rec in rows:
        if rec["metric"] != metric:
            continue
        table.append(
            [rec["method"], f"{rec['particle_fraction']:.6g}", f"{rec['value']:.10g}",
             f"{rec['stderr']:.10g}", rec["n_episodes"], rec["policy_evals"]]
        )
    table.sort(key=lambda r: (r[0], float(r[1])))
    return table


def _plot_vs_fraction(rows: list[dict], metric: str, ylabel: str, out_png: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    by_method = defaultdict(list)
    for rec in rows:
        if rec["metric"] == metric:
            by_method[rec["method"]].append(rec)
    for method, recs in sorted(by_method.items()):
        recs.sort(key=lambda r: r["particle_fraction"])
        xs = [r["particle_fraction"] * 100 for r in recs]
        ys = [r["value"] for r in recs]
        es = [r["stderr"] for r in recs]
        style = _METHOD_STYLE.get(method, dict(marker="o", label=method))
        if method == "exact" and len(xs) == 1:
            ax.axhline(ys[0], linestyle="--", **{k: v for k, v in style.items()
                                                 if k in ("color", "label")})
            continue
        ax.errorbar(xs, ys, yerr=es, capsize=2, **style)
    ax.set_xlabel("particles (% of hypothesis space)")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=140)
    plt.close(fig)


def _plot_progress(rows: list[dict], out_png: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    by_method = defaultdict(dict)
    for rec in rows:
        if rec["metric"] != "accuracy_over_progress":
            continue
        # one curve per method: prefer the largest fraction available
        key = rec["method"]
        frac = rec["particle_fraction"]
        by_method[key].setdefault(frac, []).append(rec)
    for method, by_frac in sorted(by_method.items()):
        frac = max(by_frac)
        recs = sorted(by_frac[frac], key=lambda r: r["bucket"])
        xs = [(r["bucket"] + 0.5) * 10 for r in recs]
        ys = [r["value"] for r in recs]
        es = [r["stderr"] for r in recs]
        style = _METHOD_STYLE.get(method, dict(marker="o", label=method))
        ax.errorbar(xs, ys, yerr=es, capsize=2, **style)
    ax.set_xlabel("episode progress (%)")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=140)
    plt.close(fig)


def generate_report(
    eval_csvs: Sequence[str | Path],
    out_dir: str | Path,
    prefix: str = "",
) -> dict:
    """Write per-figure tables and PNGs; returns the compute accounting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = read_eval_rows(eval_csvs)
    tag = f"{prefix}_" if prefix else ""

    _write_table(
        out / f"{tag}fig_accuracy.csv",
        ["method", "particle_fraction", "accuracy", "stderr", "n_episodes", "policy_evals"],
        _vs_fraction_table(rows, "accuracy"),
    )
    _write_table(
        out / f"{tag}fig_kl.csv",
        ["method", "particle_fraction", "kl", "stderr", "n_episodes", "policy_evals"],
        _vs_fraction_table(rows, "kl"),
    )
    prog_table = []
    for rec in rows:
        if rec["metric"] == "accuracy_over_progress":
            prog_table.append(
                [rec["method"], f"{rec['particle_fraction']:.6g}", rec["bucket"],
                 f"{rec['value']:.10g}", f"{rec['stderr']:.10g}", rec["n_episodes"]]
            )
    prog_table.sort(key=lambda r: (r[0], float(r[1]), int(r[2])))
    _write_table(
        out / f"{tag}fig_progress.csv",
        ["method", "particle_fraction", "bucket", "accuracy", "stderr", "n_episodes"],
        prog_table,
    )

    _plot_vs_fraction(rows, "accuracy", "accuracy", out / f"{tag}fig_accuracy.png")
    _plot_vs_fraction(rows, "kl", "KL(exact || method), nats", out / f"{tag}fig_kl.png")
    _plot_progress(rows, out / f"{tag}fig_progress.png")

    # compute accounting: reduction of policy evaluations versus exact
    exact_evals = max(
        (r["policy_evals"] for r in rows if r["method"] == "exact" and r["metric"] == "accuracy"),
        default=0,
    )
    accounting = []
    seen = set()
    for rec in rows:
        if rec["metric"] != "accuracy":
            continue
        key = (rec["method"], rec["particle_fraction"])
        if key in seen:
            continue
        seen.add(key)
        reduction = rec["policy_evals"] / exact_evals if exact_evals else float("nan")
        accounting.append(
            [rec["method"], f"{rec['particle_fraction']:.6g}", rec["policy_evals"],
             f"{reduction:.6g}"]
        )
    accounting.sort(key=lambda r: (r[0], float(r[1])))
    _write_table(
        out / f"{tag}compute.csv",
        ["method", "particle_fraction", "policy_evals", "reduction_vs_exact"],
        accounting,
    )
    return {"exact_policy_evals": exact_evals, "rows": len(rows)}
