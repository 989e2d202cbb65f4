"""Example figures from the CSV outputs (needs matplotlib, not a package dependency).

    python3 scripts/plot_outputs.py hpd results/simulated/hpd_vs_truth.csv
    python3 scripts/plot_outputs.py grid results/selection/model_grid.csv
    python3 scripts/plot_outputs.py histogram out/compare/histogram.csv
    python3 scripts/plot_outputs.py trace out/fit/samples/alpha_star.csv
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def hpd(df, ax):
    x = range(len(df))
    ax.vlines(x, df["hpd_lower"], df["hpd_upper"], color="salmon", lw=6, label="90% HPD")
    ax.plot(x, df["median"], "o", color="red", ms=4, label="posterior median")
    if "truth" in df:
        ax.plot(x, df["truth"], "o", color="dimgray", ms=4, label="truth")
    ax.set_xticks(list(x), [f"{p}[{i}]" for p, i in zip(df["parameter"], df["index"])], rotation=90, fontsize=7)
    ax.legend()


def grid(df, ax):
    df = df.sort_values("model_id")
    ax.plot(df["model_id"], df["DIC"], "o-", label="DIC")
    for edge in range(6, int(df["model_id"].max()), 6):
        ax.axvline(edge + 0.5, ls=":", color="gray")
    ax.set_xlabel("model")
    ax.set_ylabel("DIC")


def histogram(df, ax):
    width = df["bin_right"] - df["bin_left"]
    ax.bar(df["bin_left"], df["dgm_density"], width, align="edge", alpha=0.5, label="DGM")
    ax.bar(df["bin_left"], df["odp_density"], width, align="edge", alpha=0.5, label="ODP")
    if "truth" in df and df["truth"].notna().any():
        ax.axvline(df["truth"].iloc[0], color="black", label="true reserve")
    ax.set_xlabel("total reserve")
    ax.legend()


def trace(df, ax, index=None):
    # one parameter of a samples-directory block: the first index unless chosen
    index = index or df["index"].iloc[0]
    for chain, part in df[df["index"] == index].groupby("chain"):
        ax.plot(part["draw"], part["value"], lw=0.5, label=f"chain {chain}")
    ax.set_title(index)
    ax.set_xlabel("draw")
    ax.legend()


PLOTS = {"hpd": hpd, "grid": grid, "histogram": histogram, "trace": trace}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=PLOTS)
    ap.add_argument("csv", type=Path)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    fig, ax = plt.subplots(figsize=(9, 4))
    PLOTS[args.kind](pd.read_csv(args.csv), ax)
    fig.tight_layout()
    out = args.out or args.csv.with_suffix(".png")
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
