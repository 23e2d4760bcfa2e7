#!/usr/bin/env python3
"""Accuracy vs MFLOPs from one or more `paradis eval` CSVs.

    python scripts/plot_sweep.py sweep.csv [more.csv ...] -o sweep.png

Solid lines use total MFLOPs, dashed lines per-device MFLOPs.
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["status"] == "ok"]
    return sorted(rows, key=lambda r: float(r["total_mflops"]))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv", nargs="+")
    ap.add_argument("-o", "--out", default="sweep.png")
    args = ap.parse_args()

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.csv:
        rows = load(path)
        acc = [100 * float(r["accuracy"]) for r in rows]
        label = Path(path).stem
        ax.plot([float(r["total_mflops"]) for r in rows], acc, "o-", label=f"{label} total")
        ax.plot([float(r["per_device_mflops"]) for r in rows], acc, "s--", label=f"{label} per device")
        for r, a in zip(rows, acc):
            ax.annotate(r["switch"], (float(r["total_mflops"]), a), fontsize=7)
    ax.set_xlabel("MFLOPs (multiply-adds)")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(args.out)


if __name__ == "__main__":
    main()
