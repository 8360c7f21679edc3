#!/usr/bin/env python3
"""Summarize or plot steps.csv and curves.csv written by `onestage train`.

Prints per-role loss summaries by default. With --png and matplotlib
installed, also draws the training loss and the per-epoch accuracy curves.
"""
import argparse
import csv
import math
import sys
from collections import defaultdict
from pathlib import Path

STEP_COLUMNS = ["step", "lr", "grad_norm", "role", "config", "resolution", "loss", "loss_kind"]
CURVE_COLUMNS = ["epoch", "step", "child", "config", "madds", "accuracy", "loss"]


def read_table(path, columns, types):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != columns:
            raise ValueError(f"{path}: expected header {','.join(columns)}, got {reader.fieldnames}")
        rows = []
        for n, row in enumerate(reader, start=2):
            try:
                rows.append({k: types.get(k, str)(v) for k, v in row.items()})
            except ValueError as e:
                raise ValueError(f"{path}:{n}: {e}") from None
    return rows


def read_steps(path):
    return read_table(path, STEP_COLUMNS,
                      {"step": int, "lr": float, "grad_norm": float, "resolution": int, "loss": float})


def read_curves(path):
    return read_table(path, CURVE_COLUMNS,
                      {"epoch": int, "step": int, "madds": int, "accuracy": float, "loss": float})


def windowed(values, width):
    return [sum(values[i:i + width]) / len(values[i:i + width]) for i in range(0, len(values), width)]


def summarize(steps, curves, out):
    by_role = defaultdict(list)
    for r in steps:
        by_role[r["role"]].append(r["loss"])
    last = max(r["step"] for r in steps) if steps else -1
    print(f"steps: {last + 1}", file=out)
    for role in sorted(by_role):
        losses = by_role[role]
        bad = sum(1 for x in losses if not math.isfinite(x))
        w = windowed(losses, max(1, len(losses) // 4))
        print(f"{role:>9}: {len(losses)} rows, loss by quarter " + " ".join(f"{x:.4f}" for x in w)
              + (f", {bad} non-finite" if bad else ""), file=out)
    if curves:
        per_child = defaultdict(list)
        for r in curves:
            per_child[r["child"]].append(r)
        for child, rows in sorted(per_child.items()):
            best = max(rows, key=lambda r: r["accuracy"])
            print(f"{child:>9}: final acc {rows[-1]['accuracy']:.4f} (epoch {rows[-1]['epoch']}), "
                  f"best {best['accuracy']:.4f} (epoch {best['epoch']})", file=out)


def plot(steps, curves, png):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2 if curves else 1, figsize=(11 if curves else 6, 4))
    axes = axes if curves else [axes]
    by_role = defaultdict(lambda: ([], []))
    for r in steps:
        xs, ys = by_role[r["role"]]
        xs.append(r["step"])
        ys.append(r["loss"])
    for role, (xs, ys) in sorted(by_role.items()):
        axes[0].plot(xs, ys, label=role, linewidth=0.8)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    if curves:
        per_child = defaultdict(lambda: ([], []))
        for r in curves:
            xs, ys = per_child[r["child"]]
            xs.append(r["epoch"])
            ys.append(r["accuracy"])
        for child, (xs, ys) in sorted(per_child.items()):
            axes[1].plot(xs, ys, marker="o", markersize=2, label=child)
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("top-1 after calibration")
        axes[1].legend()
    fig.tight_layout()
    fig.savefig(png, dpi=120)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path, help="directory holding steps.csv and optionally curves.csv")
    ap.add_argument("--png", type=Path, help="write a figure here (needs matplotlib)")
    args = ap.parse_args(argv)
    try:
        steps = read_steps(args.run_dir / "steps.csv")
        curves_path = args.run_dir / "curves.csv"
        curves = read_curves(curves_path) if curves_path.exists() else []
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    summarize(steps, curves, sys.stdout)
    if args.png:
        try:
            plot(steps, curves, args.png)
        except ImportError:
            print("error: --png needs matplotlib", file=sys.stderr)
            return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
