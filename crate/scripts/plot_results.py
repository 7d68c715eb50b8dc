#!/usr/bin/env python3
"""Plot summary CSVs written by `dr-cme`.

    python scripts/plot_results.py results/fit_convergence_summary.csv -o fit.png
    python scripts/plot_results.py results/power_curve_summary.csv -o power.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_convergence(df, ax):
    for stat, g in df.groupby("statistic"):
        g = g.sort_values("grid_point")
        ax.errorbar(g["grid_point"], g["median"], yerr=g["std_error"], marker="o", capsize=3, label=stat)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("median embedding error")


def plot_rejections(df, ax, alpha):
    for (stat, setting), g in df.groupby(["statistic", "setting"]):
        g = g.sort_values("grid_point")
        ax.errorbar(
            g["grid_point"],
            g["rejection_rate"],
            yerr=g["rejection_std_error"],
            marker="o",
            capsize=3,
            label=f"{stat} ({setting})",
        )
    ax.axhline(alpha, color="grey", linestyle="--", linewidth=1)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("grid point")
    ax.set_ylabel("rejection rate")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("summary", help="a *_summary.csv file")
    p.add_argument("-o", "--output", default="plot.png")
    p.add_argument("--alpha", type=float, default=0.05)
    args = p.parse_args()

    df = pd.read_csv(args.summary)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if df["rejection_rate"].isna().all():
        plot_convergence(df, ax)
    else:
        plot_rejections(df, ax, args.alpha)
    ax.set_title(df["suite"].iloc[0])
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)


if __name__ == "__main__":
    main()
