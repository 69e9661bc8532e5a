"""Plot-data export: comma-separated tables plus a rendered PNG of each.

Tables are the primary output and can be redrawn with any tool; the figure is
a convenience preview written next to the table.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import load_config, load_rows  # noqa: E402

PLOTS = ("loss_curve", "mm_curve", "gap_curve", "distance_bars")
CURVE_COLUMNS = {
    "loss_curve": ("loss",),
    "mm_curve": ("d_mm_on", "d_mm_off"),
    "gap_curve": ("exact_gap",),
}
BAR_METRICS = ("exact_gap", "d_mm_on", "d_mm_off", "d_tv_off", "d_kl_off")

STYLE = {
    "figure.figsize": (4.8, 3.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _num(v):
    return math.nan if v is None else float(v)


def curve_table(run_dirs: list, what: str) -> tuple[list[str], list[list]]:
    """One row per evaluation.  With several runs a leading ``run`` column is added."""
    cols = CURVE_COLUMNS[what]
    multi = len(run_dirs) > 1
    header = (["run"] if multi else []) + ["step", *cols]
    rows = []
    for d in run_dirs:
        for r in load_rows(d):
            rows.append(([Path(d).name] if multi else []) + [r["step"]] + [_num(r.get(c)) for c in cols])
    return header, rows


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.array([v for v in values if not math.isnan(v)])
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std())


def bars_table(run_dirs: list) -> tuple[list[str], list[list]]:
    """Final-row metrics grouped by (kind, mode) with seed means and stdevs."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for d in run_dirs:
        rows = load_rows(d)
        cfg = load_config(d)
        key = (str(cfg.get("method", "?")).upper(), str(cfg.get("mode", "?")))
        groups.setdefault(key, []).append(rows[-1])
    header = ["kind", "mode", "n"]
    for m in BAR_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    out = []
    for (kind, mode), finals in groups.items():
        row = [kind, mode, len(finals)]
        for m in BAR_METRICS:
            row += list(_mean_std([_num(f.get(m)) for f in finals]))
        out.append(row)
    return header, out


def write_csv(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _render_curves(ax, header, rows, what):
    has_run = header[0] == "run"
    cols = header[2:] if has_run else header[1:]
    runs = sorted({r[0] for r in rows}) if has_run else [None]
    for run in runs:
        sel = [r[1:] if has_run else r for r in rows if not has_run or r[0] == run]
        steps = [r[0] for r in sel]
        for j, c in enumerate(cols):
            label = c if run is None else f"{run} {c}"
            ax.plot(steps, [r[1 + j] for r in sel], label=label)
    ax.set_xlabel("training step")
    ax.set_ylabel(what.replace("_curve", ""))
    if len(runs) * len(cols) > 1:
        ax.legend()


def _render_bars(ax, header, rows):
    i_mean, i_std = header.index("exact_gap_mean"), header.index("exact_gap_std")
    labels = [f"{r[0]}\n{r[1]}" for r in rows]
    x = np.arange(len(rows))
    ax.bar(x, [r[i_mean] for r in rows], yerr=[r[i_std] for r in rows], color="#4c72b0", capsize=2)
    ax.set_xticks(x, labels, fontsize=6)
    ax.set_ylabel("final exact gap")
    ax.axhline(0.0, color="k", lw=0.6)


def render(header: list[str], rows: list[list], what: str, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if what == "distance_bars":
            _render_bars(ax, header, rows)
        else:
            _render_curves(ax, header, rows, what)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def export_plot(run_dirs: list, what: str, out_prefix) -> tuple[Path, Path]:
    """Write ``<out_prefix>.csv`` and ``<out_prefix>.png``; returns both paths."""
    if what not in PLOTS:
        raise ValueError(f"unknown plot {what!r}; expected one of {PLOTS}")
    if not run_dirs:
        raise ValueError("no run directories given")
    if what == "distance_bars":
        header, rows = bars_table(run_dirs)
    else:
        header, rows = curve_table(run_dirs, what)
    prefix = Path(out_prefix)
    csv_path = write_csv(prefix.with_suffix(".csv"), header, rows)
    png_path = render(header, rows, what, prefix.with_suffix(".png"))
    return csv_path, png_path
