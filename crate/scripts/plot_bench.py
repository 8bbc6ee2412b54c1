"""Plot a bench CSV written by `lmn bench`: time and peak bytes against L.

usage: python scripts/plot_bench.py runs/bench/bench.csv [out.png]
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    path = sys.argv[1]
    out = sys.argv[2] if len(sys.argv) > 2 else path.rsplit(".", 1)[0] + ".png"
    df = pd.read_csv(path, comment="#")
    df = df[df["status"] == "ok"]
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(11, 4))
    for (variant, mode), g in df.groupby(["variant", "mode"]):
        g = g.sort_values("L")
        label = f"{variant} ({mode})"
        ax_t.plot(g["L"], g["median_seconds"], marker="o", label=label)
        ax_m.plot(g["L"], g["peak_bytes"], marker="o", label=label)
    for ax, name in [(ax_t, "median seconds"), (ax_m, "peak bytes")]:
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("sequence length")
        ax.set_ylabel(name)
        ax.grid(True, which="both", alpha=0.3)
    ax_t.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
