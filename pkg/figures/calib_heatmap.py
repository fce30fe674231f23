#!/usr/bin/env python3
"""Heatmap of the calibration objective over the offset grid, with the
minimum marked.

Input columns: refl_offset_db, diff_offset_db, objective.
"""

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))
from _csv_contract import load_csv  # noqa: E402

COLUMNS = ["refl_offset_db", "diff_offset_db", "objective"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--in", dest="infile", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--vmin", type=float, default=None)
    ap.add_argument("--vmax", type=float, default=None)
    args = ap.parse_args(argv)

    rows = load_csv(args.infile, COLUMNS)
    r = np.array([float(x[0]) for x in rows])
    d = np.array([float(x[1]) for x in rows])
    o = np.array([float(x[2]) for x in rows])
    r_axis = np.unique(r)
    d_axis = np.unique(d)
    grid = np.full((len(d_axis), len(r_axis)), np.nan)
    grid[np.searchsorted(d_axis, d), np.searchsorted(r_axis, r)] = o

    k = int(np.argmin(o))
    r_best, d_best = r[k], d[k]

    fig, ax = plt.subplots(figsize=(6, 5), dpi=120)
    mesh = ax.pcolormesh(r_axis, d_axis, grid, shading="nearest", cmap="magma",
                         vmin=args.vmin, vmax=args.vmax)
    fig.colorbar(mesh, ax=ax, label="objective")
    ax.plot([r_best], [d_best], "w*", ms=16, mec="black", mew=1.0)
    ax.set_xlabel("reflection offset (dB)")
    ax.set_ylabel("diffraction offset (dB)")
    ax.set_title("offset search")
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Software": None})
    print(f"wrote {args.out}; minimum at ({r_best:g}, {d_best:g})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
