#!/usr/bin/env python3
"""Stem plot of component power against propagation distance, comparing the
extracted components with the predicted specular rays.

Input columns: source, distance_m, power_dbm.
"""

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

sys.path.insert(0, str(Path(__file__).resolve().parent))
from _csv_contract import load_csv  # noqa: E402

COLUMNS = ["source", "distance_m", "power_dbm"]

STYLE = {"measured": ("tab:blue", "extracted components"),
         "predicted": ("tab:orange", "predicted rays")}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--in", dest="infile", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--vmin", type=float, default=None, help="power floor shown, dBm")
    ap.add_argument("--vmax", type=float, default=None)
    args = ap.parse_args(argv)

    rows = load_csv(args.infile, COLUMNS)
    fig, ax = plt.subplots(figsize=(7.5, 4), dpi=120)
    floor = args.vmin if args.vmin is not None else \
        min(float(r[2]) for r in rows) - 3.0
    for source, (color, label) in STYLE.items():
        pts = [(float(r[1]), float(r[2])) for r in rows if r[0] == source]
        if not pts:
            continue
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.vlines(xs, floor, ys, colors=color, lw=1.0, alpha=0.8)
        ax.plot(xs, ys, ".", color=color, ms=5, label=label)
    ax.set_ylim(floor, args.vmax)
    ax.set_xlabel("propagation distance (m)")
    ax.set_ylabel("power (dBm)")
    ax.legend(loc="upper right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Software": None})
    print(f"wrote {args.out} ({len(rows)} stems)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
