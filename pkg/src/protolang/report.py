"""Comparison tables, CSV dumps and sweep plots from a set of run reports."""

from __future__ import annotations

import csv
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import plotting
from .errors import ConfigurationError
from .training import MetricsReport, confidence_halfwidth


def group_reports(reports) -> "OrderedDict[str, list[MetricsReport]]":
    groups: OrderedDict[str, list[MetricsReport]] = OrderedDict()
    for r in reports:
        groups.setdefault(r.name, []).append(r)
    return groups


def format_table(reports) -> str:
    """One row per method name; accuracies pooled across seeds."""
    rows = []
    for name, group in group_reports(reports).items():
        accs = np.concatenate([np.asarray(r.accuracies, dtype=np.float64) for r in group])
        seeds = ",".join(str(r.seed) for r in group)
        per_seed = " ".join(f"{100 * r.mean:.2f}" for r in group)
        rows.append((name, seeds, len(accs), f"{100 * accs.mean():.2f}", f"{100 * confidence_halfwidth(accs):.2f}",
                     per_seed))
    header = ("method", "seeds", "tasks", "acc(%)", "ci95(%)", "per-seed acc(%)")
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, rows)]) + "\n"


def sweep_series(reports, param: str):
    """(x, mean, ci) per swept value, accuracies pooled across seeds."""
    by_x: dict = {}
    for r in reports:
        if r.extra.get("param") == param:
            by_x.setdefault(r.extra["value"], []).extend(r.accuracies)
    xs = sorted(by_x)
    return xs, [float(np.mean(by_x[x])) for x in xs], [confidence_halfwidth(by_x[x]) for x in xs]


def emit_report(reports, out_dir, title: str | None = None) -> dict:
    """Write ``table.txt``, ``summary.csv``, ``per_task.csv`` and one PNG per sweep."""
    reports = list(reports)
    if not reports:
        raise ConfigurationError("emit_report needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "table.txt", "summary": out / "summary.csv", "per_task": out / "per_task.csv",
             "plots": []}
    table = format_table(reports)
    paths["table"].write_text((f"# {title}\n" if title else "") + table)

    with paths["summary"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "sweep_param", "sweep_value", "n_tasks", "mean", "ci95"])
        for r in reports:
            w.writerow([r.name, r.seed, r.extra.get("param", ""), r.extra.get("value", ""), r.n_tasks,
                        f"{r.mean:.6f}", f"{r.ci95:.6f}"])
    with paths["per_task"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "task", "accuracy"])
        for r in reports:
            for i, a in enumerate(r.accuracies):
                w.writerow([r.name, r.seed, i, repr(float(a))])

    params = list(dict.fromkeys(r.extra["param"] for r in reports if r.extra.get("param")))
    labels = {"descs_per_class": "class-level descriptions per class", "decoder_layers": "decoder layers"}
    for param in params:
        xs, means, cis = sweep_series(reports, param)
        fig = plotting.sweep_figure(xs, means, cis, labels.get(param, param), title)
        paths["plots"].append(plotting.save(fig, out / f"sweep_{param}.png"))
    for name, group in group_reports(reports).items():
        if group[0].loss_curves.get("epi"):
            fig = plotting.curves_figure(group[0].loss_curves, f"{name} (seed {group[0].seed})")
            paths["plots"].append(plotting.save(fig, out / f"curves_{name}.png"))
    return paths
