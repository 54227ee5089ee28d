"""Static report: aggregated tables, figures and an HTML summary."""

from __future__ import annotations

import html
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from invarlab.errors import EmptyRunError  # noqa: E402
from invarlab.experiments.runner import RunRecord, read_rows  # noqa: E402

# no version string or timestamp in the PNGs, so figures are bit-reproducible
PNG_METADATA = {"Software": None}


@dataclass
class Cell:
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def sd(self) -> float | None:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else None

    def format(self, digits: int = 3) -> str:
        if self.sd is None:
            return f"{self.mean:.{digits}f}"
        return f"{self.mean:.{digits}f}±{self.sd:.{digits}f}"


@dataclass
class ReportBundle:
    directory: Path
    html: Path
    summary_csv: Path
    figures: list[Path] = field(default_factory=list)
    tables: dict[str, list[list[str]]] = field(default_factory=dict)


def aggregate(rows: Sequence[dict[str, str]]) -> dict[tuple, Cell]:
    """Group rows over seeds by (test_set, model, train, test, metric, n_objects)."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        key = (r.get("test_set", ""), r["model"], r["train_transform"], r["test_transform"], r["metric_name"],
               r.get("n_objects", ""))
        v = float(r["value"])
        if not math.isnan(v):
            groups[key].append(v)
    return {k: Cell(v) for k, v in groups.items() if v}


def _ordered(values, preferred: Sequence[str] = ()) -> list[str]:
    values = set(values)
    head = [v for v in preferred if v in values]
    return head + sorted(values - set(head))


def table_samediff_layout(cells: dict[tuple, Cell], metric: str, test_set: str = "novel") -> list[list[str]]:
    """One row per (model, trained-on-test) and (model, none); one column per test kind."""
    keys = [k for k in cells if k[4] == metric and k[0] == test_set and not k[5]]
    tests = _ordered({k[3] for k in keys} - {"none"})
    if not tests:
        return []
    out = [["model", "training"] + tests]
    for model in _ordered({k[1] for k in keys}):
        trained = [model, "transformed"]
        base = [model, "none"]
        for t in tests:
            c = cells.get((test_set, model, t, t, metric, ""))
            trained.append(c.format() if c else "")
            c = cells.get((test_set, model, "none", t, metric, ""))
            base.append(c.format() if c else "")
        out.extend([trained, base])
    return out


def table_cross(cells: dict[tuple, Cell], model: str, metric: str, test_set: str = "novel") -> list[list[str]]:
    keys = [k for k in cells if k[1] == model and k[4] == metric and k[0] == test_set and not k[5]]
    trains = [t for t in _ordered({k[2] for k in keys}) if t != "none"] + ["none"]
    tests = _ordered({k[3] for k in keys})
    out = [["trained on \\ tested on"] + tests]
    for tr in trains:
        row = [tr]
        for te in tests:
            c = cells.get((test_set, model, tr, te, metric, ""))
            row.append(c.format() if c else "")
        out.append(row)
    return out


def table_sweep(cells: dict[tuple, Cell], metric: str) -> list[list[str]]:
    keys = [k for k in cells if k[5] and k[4] == metric]
    ns = sorted({k[5] for k in keys}, key=int)
    out = [["model", "training", "test"] + [f"N={n}" for n in ns]]
    combos = sorted({(k[0], k[1], k[2], k[3]) for k in keys})
    for ts, model, tr, te in combos:
        row = [model, tr, te]
        for n in ns:
            c = cells.get((ts, model, tr, te, metric, n))
            row.append(c.format() if c else "")
        out.append(row)
    return out


def _html_table(title: str, rows: list[list[str]]) -> str:
    if not rows:
        return ""
    head = "".join(f"<th>{html.escape(c)}</th>" for c in rows[0])
    body = "".join("<tr>" + "".join(f"<td>{html.escape(c)}</td>" for c in r) + "</tr>" for r in rows[1:])
    return f"<h2>{html.escape(title)}</h2>\n<table>\n<tr>{head}</tr>\n{body}\n</table>\n"


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def fig_samediff(cells: dict[tuple, Cell], metric: str, path: Path) -> Path | None:
    table = table_samediff_layout(cells, metric)
    if not table:
        return None
    tests = table[0][2:]
    models = sorted({r[0] for r in table[1:]})
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(tests), 3.2))
    width = 0.8 / (2 * len(models))
    x = np.arange(len(tests))
    for i, model in enumerate(models):
        for j, cond in enumerate(("transformed", "none")):
            means, sds = [], []
            for t in tests:
                c = cells.get(("novel", model, t if cond == "transformed" else "none", t, metric, ""))
                means.append(c.mean if c else np.nan)
                sds.append((c.sd or 0.0) if c else 0.0)
            off = (2 * i + j) * width - 0.4 + width / 2
            ax.bar(x + off, means, width, yerr=sds, label=f"{model} ({cond})",
                   color=f"C{i}", alpha=1.0 if cond == "transformed" else 0.45)
    ax.set_xticks(x, tests, rotation=30)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def fig_cross(table: list[list[str]], title: str, path: Path) -> Path:
    trains = [r[0] for r in table[1:]]
    tests = table[0][1:]
    m = np.array([[float(c.split("±")[0]) if c else np.nan for c in r[1:]] for r in table[1:]])
    fig, ax = plt.subplots(figsize=(1.5 + 0.8 * len(tests), 1.2 + 0.5 * len(trains)))
    im = ax.imshow(m, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(tests)), tests, rotation=30)
    ax.set_yticks(range(len(trains)), trains)
    for i in range(len(trains)):
        for j in range(len(tests)):
            if not np.isnan(m[i, j]):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="w" if m[i, j] < 0.6 else "k")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)


def _theta_label(t: Any) -> str:
    if isinstance(t, dict):
        return f"{t.get('inclination', 0):g}/{t.get('azimuth', 0):g}"
    if isinstance(t, list):
        return ",".join(f"{v:g}" for v in t)
    return f"{t:g}" if isinstance(t, (int, float)) else str(t)


def fig_curves(curve_files: Sequence[str], path: Path) -> Path | None:
    """Mean adjusted invariance across seeds, one line per (model, training), one panel per test kind."""
    groups: dict[tuple[str, str], dict[str, list[dict]]] = defaultdict(lambda: defaultdict(list))
    for f in sorted(curve_files):
        p = Path(f)
        d = json.loads(p.read_text())
        # <out>/curves/<model>/<cond>/seed<s>/<test>_<sim>.json
        model, cond = p.parts[-4], p.parts[-3]
        groups[(d["kind"], d["similarity"])][f"{model}:{cond}"].append(d)
    if not groups:
        return None
    panels = sorted(groups)
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.0), squeeze=False)
    for ax, (kind, sim) in zip(axes[0], panels):
        for label in sorted(groups[(kind, sim)]):
            curves = groups[(kind, sim)][label]
            ys = np.array([[np.nan if v is None else v for v in c["I_adj"]] for c in curves], dtype=float)
            ax.plot(np.arange(ys.shape[1]), np.nanmean(ys, axis=0), marker="o", ms=2, lw=1, label=label)
        grid = curves[0]["theta_grid"]
        step = max(1, len(grid) // 6)
        ax.set_xticks(range(0, len(grid), step), [_theta_label(t) for t in grid[::step]], rotation=45, fontsize=6)
        ax.set_ylim(-0.2, 1.05)
        ax.set_title(f"{kind} ({sim})", fontsize=9)
        ax.set_ylabel("adjusted invariance")
        ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, path)


def fig_sweep(cells: dict[tuple, Cell], metric: str, path: Path) -> Path | None:
    keys = sorted({k[:4] for k in cells if k[5] and k[4] == metric})
    if not keys:
        return None
    fig, ax = plt.subplots(figsize=(4, 3))
    for ts, model, tr, te in keys:
        pts = sorted((int(k[5]), c) for k, c in cells.items() if k[5] and k[:5] == (ts, model, tr, te, metric))
        ax.errorbar([n for n, _ in pts], [c.mean for _, c in pts], yerr=[c.sd or 0.0 for _, c in pts],
                    marker="o", capsize=2, label=f"{model} {tr}->{te}")
    ax.set_xscale("log")
    ax.set_xlabel("objects per class")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, path)


def _write_summary(cells: dict[tuple, Cell], path: Path) -> None:
    with_sd = any(c.sd is not None for c in cells.values())
    cols = ["test_set", "model", "train_transform", "test_transform", "metric_name", "n_objects", "n_seeds", "mean"]
    if with_sd:
        cols.append("sd")
    lines = [",".join(cols)]
    for k in sorted(cells):
        c = cells[k]
        vals = list(k) + [str(len(c.values)), repr(c.mean)]
        if with_sd:
            vals.append("" if c.sd is None else repr(c.sd))
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")


def report(run: RunRecord, out_dir: str | os.PathLike | None = None) -> ReportBundle:
    """Aggregate a run's result files into ``report.html``, ``summary.csv`` and PNG figures."""
    rows = []
    for f in run.result_files:
        if Path(f).is_file():
            rows.extend(read_rows(f))
    if not rows:
        raise EmptyRunError(f"run {run.experiment_id!r} has no results to report")
    cells = aggregate(rows)
    out = Path(out_dir or Path(run.output_dir) / "report")
    out.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out, out / "report.html", out / "summary.csv")
    _write_summary(cells, bundle.summary_csv)

    sections = []
    metrics = sorted({k[4] for k in cells})
    for metric in metrics:
        if metric == "samediff_accuracy" or metric.startswith("mean_adjusted"):
            t = table_samediff_layout(cells, metric)
            if t:
                bundle.tables[metric] = t
                sections.append(_html_table(f"{metric} on novel classes", t))
                fig = fig_samediff(cells, metric, out / f"{metric}.png")
                if fig:
                    bundle.figures.append(fig)
        elif metric.startswith("5afc"):
            for ts in sorted({k[0] for k in cells if k[4] == metric and not k[5]}):
                for model in sorted({k[1] for k in cells if k[4] == metric and k[0] == ts and not k[5]}):
                    t = table_cross(cells, model, metric, ts)
                    name = f"{metric}_{ts}_{model}"
                    bundle.tables[name] = t
                    sections.append(_html_table(f"{metric}, {model}, {ts} objects", t))
                    bundle.figures.append(fig_cross(t, f"{model} {metric} ({ts})", out / f"{name}.png"))
            sweep = table_sweep(cells, metric)
            if len(sweep) > 1:
                bundle.tables[f"sweep_{metric}"] = sweep
                sections.append(_html_table(f"{metric} by objects per class", sweep))
                fig = fig_sweep(cells, metric, out / f"sweep_{metric}.png")
                if fig:
                    bundle.figures.append(fig)
    fig = fig_curves(run.curve_files(), out / "invariance_curves.png")
    if fig:
        bundle.figures.append(fig)

    n_seeds = sorted({r["seed"] for r in rows}, key=int)
    imgs = "".join(f'<img src="{html.escape(p.name)}" alt="{html.escape(p.stem)}">\n' for p in bundle.figures)
    bundle.html.write_text(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(run.experiment_id)}</title>\n"
        "<style>table{border-collapse:collapse}td,th{border:1px solid #999;padding:2px 6px}</style>"
        "</head><body>\n"
        f"<h1>{html.escape(run.experiment_id)}</h1>\n"
        f"<p>config {html.escape(run.config_hash)}, seeds {', '.join(n_seeds)}, {len(rows)} result rows</p>\n"
        + "".join(sections) + "<h2>Figures</h2>\n" + imgs + "</body></html>\n"
    )
    return bundle
