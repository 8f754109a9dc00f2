"""Static SVG figures, each written next to a CSV holding exactly the plotted numbers."""

import csv
import io
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .synth import BASELINE_R_THRESHOLD, CYCLE_THRESHOLD  # noqa: E402

COM_COLOR = "red"
EMT_COLOR = "blue"
PRED_COLOR = "green"
HEAD_COLORS = ("tab:gray", "tab:orange")

RC = {
    "svg.hashsalt": "surroforge",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _num(v):
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) for v in row])
    _atomic_write(path, buf.getvalue().encode("utf-8"))


def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _atomic_write(path, buf.getvalue())


def plot_signals(out_stem, index, com, emt, pred=None, title=""):
    """COM (red), EMT (blue) and optional surrogate (green) over a sample range."""
    out_stem = Path(out_stem)
    header = ["index", "com", "emt"] + (["prediction"] if pred is not None else [])
    cols = [index, com, emt] + ([pred] if pred is not None else [])
    rows = [[int(c[0])] + [float(v) for v in c[1:]] for c in zip(*cols)]
    write_csv(out_stem.with_suffix(".csv"), header, rows)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.plot(index, com, color=COM_COLOR, lw=0.8, label="COM")
        ax.plot(index, emt, color=EMT_COLOR, lw=1.2, label="EMT")
        if pred is not None:
            ax.plot(index, pred, color=PRED_COLOR, lw=1.2, label="Surrogate")
        ax.set_xlabel("time step (100 ms)")
        ax.set_ylabel("displacement (mm)")
        ax.set_title(title)
        ax.legend(loc="upper right", frameon=False, ncol=3)
        fig.tight_layout()
        _save(fig, out_stem.with_suffix(".svg"))


def plot_scatter(out_stem, scatter, x_key, threshold, xlabel, mean_r=None):
    """Per-patient model R against ``x_key`` with a vertical reference line at ``threshold``."""
    out_stem = Path(out_stem)
    rows = [[s["patient_id"], s[x_key], s["r_pred_emt"]] for s in scatter]
    write_csv(out_stem.with_suffix(".csv"), ["patient_id", x_key, "r_pred_emt"], rows)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter([r[1] for r in rows], [r[2] for r in rows], s=14, color="black")
        ax.axvline(threshold, color="red", ls="--", lw=1)
        if mean_r is not None:
            ax.axhline(mean_r, color="gray", ls=":", lw=1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("R (surrogate vs EMT)")
        fig.tight_layout()
        _save(fig, out_stem.with_suffix(".svg"))


def plot_cycles_vs_r(out_stem, scatter, mean_r=None):
    plot_scatter(out_stem, scatter, "breathing_cycles", CYCLE_THRESHOLD, "breathing cycles", mean_r)


def plot_baseline_vs_r(out_stem, scatter, mean_r=None):
    plot_scatter(out_stem, scatter, "baseline_r", BASELINE_R_THRESHOLD, "baseline R (COM vs EMT)", mean_r)


def plot_head_quarters(out_stem, head_table, combined=None):
    """Grouped bars of mean R per quarter for each camera head."""
    out_stem = Path(out_stem)
    header = ["quarter", "head1_r", "head2_r"] + (["combined_r"] if combined is not None else [])
    rows = []
    for q in range(4):
        row = [q + 1, float(head_table[0][q]), float(head_table[1][q])]
        if combined is not None:
            row.append(float(combined[q]))
        rows.append(row)
    write_csv(out_stem.with_suffix(".csv"), header, rows)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        width = 0.38
        for h in range(2):
            ax.bar([q + (h - 0.5) * width for q in range(4)], [r[1 + h] for r in rows], width,
                   color=HEAD_COLORS[h], label=f"head {h + 1}")
        ax.set_xticks(range(4))
        ax.set_xticklabels([f"Q{q}" for q in range(1, 5)])
        ax.set_ylabel("mean R with EMT")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, out_stem.with_suffix(".svg"))
