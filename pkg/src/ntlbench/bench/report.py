"""Benchmark report tables: CSV, Markdown and an optional bar chart."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

from .registry import Registry, RunRecord

BASE_COLUMNS = ["method", "dataset", "SA", "TA", "OA"]
MINUS = "−"


def format_delta(delta: float) -> str:
    """Signed one-decimal delta in parentheses, e.g. ``(+34.4)`` or ``(−2.2)``."""
    r = round(delta, 1)
    if r == 0:
        return "(+0.0)"
    return f"({'+' if r > 0 else MINUS}{abs(r):.1f})"


def _attack_keys(records: Sequence[RunRecord]) -> list[list[str]]:
    """Column key per attack result; repeated labels in one record get ``#2``, ``#3`` ..."""
    keys = []
    for rec in records:
        seen: dict[str, int] = {}
        row = []
        for a in rec.attacks:
            seen[a.label] = seen.get(a.label, 0) + 1
            row.append(a.label if seen[a.label] == 1 else f"{a.label}#{seen[a.label]}")
        keys.append(row)
    return keys


def report_table(records: Sequence[RunRecord]) -> tuple[list[str], list[list[str]]]:
    keys = _attack_keys(records)
    order: list[str] = []
    for row in keys:
        order += [k for k in row if k not in order]
    header = BASE_COLUMNS + [f"{k} {m}" for k in order for m in ("SA", "TA")]
    rows = []
    for rec, row_keys in zip(records, keys):
        p = rec.pretrain
        cells = {"method": rec.method, "dataset": rec.dataset,
                 "SA": f"{p.SA:.1f}", "TA": f"{p.TA:.1f}", "OA": f"{p.OA:.1f}"}
        for k, a in zip(row_keys, rec.attacks):
            d = a.deltas
            for m in ("SA", "TA"):
                cells[f"{k} {m}"] = f"{getattr(a.post, m):.1f} {format_delta(d[m])}"
        rows.append([cells.get(h, "") for h in header])
    return header, rows


def _markdown(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _plot(records: Sequence[RunRecord], path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), sharey=True)
    names = [f"{r.method}\n{r.run_id[:8]}" for r in records]
    series = {"pre-train": [(r.pretrain.SA, r.pretrain.TA) for r in records]}
    for rec_i, (rec, keys) in enumerate(zip(records, _attack_keys(records))):
        for k, a in zip(keys, rec.attacks):
            series.setdefault(k, [(np.nan, np.nan)] * len(records))[rec_i] = (a.post.SA, a.post.TA)
    x = np.arange(len(records))
    width = 0.8 / len(series)
    for j, (label, vals) in enumerate(series.items()):
        for ax, m in zip(axes, range(2)):
            ax.bar(x + j * width - 0.4 + width / 2, [v[m] for v in vals], width, label=label)
    for ax, title in zip(axes, ("SA", "TA")):
        ax.set_title(title)
        ax.set_xticks(x)
        ax.set_xticklabels(names, fontsize=7)
        ax.set_ylim(0, 100)
        ax.spines[["top", "right"]].set_visible(False)
    axes[0].set_ylabel("accuracy (%)")
    axes[1].legend(fontsize=7, frameon=False, loc="upper left", bbox_to_anchor=(1, 1))
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cli_report(run_ids: Sequence[str], out_dir: str | Path, plot: bool = False,
               registry: Registry | str | None = None) -> dict[str, Path]:
    """Write report.csv and report.md (plus report.png with ``plot``) for the given runs."""
    reg = registry if isinstance(registry, Registry) else Registry(registry)
    records = [reg.get(r) for r in run_ids]
    header, rows = report_table(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "markdown": out / "report.md"}
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    paths["markdown"].write_text(_markdown(header, rows), encoding="utf-8")
    if plot and records:
        paths["plot"] = out / "report.png"
        _plot(records, paths["plot"])
    return paths
