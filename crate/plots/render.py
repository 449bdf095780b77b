#!/usr/bin/env python3
"""Render the CSV artifacts of a run directory to PNGs.

Usage: python3 plots/render.py <run-dir> [more run-dirs...]

Draws whatever it finds: confidence scatter, eigendirection trajectories,
truncation curves, loss-switch accuracy, interpolation summary, and the
ratio-sweep histogram. Skips files that are absent.
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    print(f"wrote {path}")


def render_scatter(run, rows):
    fig, ax = plt.subplots(figsize=(5, 5))
    clean = [r for r in rows if r["is_noisy"] == "false"]
    noisy = [r for r in rows if r["is_noisy"] == "true"]
    for part, color, label in ((clean, "tab:blue", "clean"), (noisy, "tab:red", "flipped")):
        if part:
            ax.scatter(
                [float(r["x"]) for r in part],
                [float(r["y"]) for r in part],
                s=6, alpha=0.5, c=color, label=label,
            )
    xs = [float(r["x"]) for r in rows]
    lo, hi = min(xs), max(xs)
    ax.plot([lo, hi], [lo, hi], "k--", lw=1, label="y = x")
    ax.set_xlabel("teacher confidence (log-odds)")
    ax.set_ylabel("student confidence (log-odds)")
    ax.legend()
    save(fig, run / "scatter.png")


def render_traces(run, rows, name):
    series = defaultdict(list)
    for r in rows:
        series[(r["model_tag"], int(r["direction"]))].append(
            (float(r["step"]), float(r["value"]))
        )
    directions = sorted({d for _, d in series})
    fig, axes = plt.subplots(
        1, len(directions), figsize=(3.2 * len(directions), 3.2), squeeze=False
    )
    for ax, d in zip(axes[0], directions):
        for tag, style in (("teacher", "-"), ("student", "--"), ("distilled", "--")):
            pts = sorted(series.get((tag, d), []))
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], style, label=tag)
        ax.set_title(f"direction {d}")
        ax.set_xlabel("step")
        if max(p[0] for pts in series.values() for p in pts) > 100:
            ax.set_xscale("symlog")
    axes[0][0].set_ylabel("projection norm")
    axes[0][-1].legend()
    save(fig, run / f"{name}.png")


def render_truncation(run, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = defaultdict(list)
    for r in rows:
        k = int(r["k_top"])
        series[(r["model"], "clean")].append((k, float(r["clean_acc"])))
        series[(r["model"], "flipped")].append((k, float(r["flipped_acc"])))
    for (model, subset), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                ls="-" if subset == "clean" else "--", label=f"{model} {subset}")
    ax.set_xlabel("top directions kept")
    ax.set_ylabel("accuracy on observed labels")
    ax.invert_xaxis()
    ax.legend(fontsize=8)
    save(fig, run / "truncation.png")


def render_switch(run, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = defaultdict(list)
    for r in rows:
        series[r["model_tag"]].append((int(r["step"]), float(r["test_acc"])))
    for tag, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=tag)
    ax.set_xlabel("step")
    ax.set_ylabel("test accuracy")
    ax.legend()
    save(fig, run / "switch.png")


def render_interpolation(run, rows):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [r["model"] for r in rows]
    x = range(len(rows))
    ax.bar([i - 0.2 for i in x], [float(r["train_acc"]) for r in rows], 0.4, label="train")
    ax.bar([i + 0.2 for i in x], [float(r["test_acc"]) for r in rows], 0.4, label="test")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("accuracy")
    ax.legend()
    save(fig, run / "interpolation.png")


def render_sweep(run, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist([float(r["ratio"]) for r in rows], bins=40)
    ax.axvline(1.0, color="k", ls="--", lw=1)
    ax.set_xlabel("matched slow-direction ratio")
    ax.set_ylabel("tuples")
    save(fig, run / "sweep.png")


RENDERERS = [
    ("scatter.csv", render_scatter),
    ("trace.csv", lambda run, rows: render_traces(run, rows, "trace")),
    ("eigentrace.csv", lambda run, rows: render_traces(run, rows, "eigentrace")),
    ("truncation.csv", render_truncation),
    ("switch.csv", render_switch),
    ("interpolation.csv", render_interpolation),
    ("sweep.csv", render_sweep),
]


def main():
    if len(sys.argv) < 2:
        sys.exit(__doc__.strip())
    for arg in sys.argv[1:]:
        run = Path(arg)
        if not run.is_dir():
            sys.exit(f"not a directory: {run}")
        found = False
        for name, renderer in RENDERERS:
            path = run / name
            if path.exists():
                rows = read(path)
                if rows:
                    renderer(run, rows)
                    found = True
        if not found:
            print(f"nothing to render in {run}")


if __name__ == "__main__":
    main()
