#!/usr/bin/env python3
"""Render a power angular-delay profile heatmap from the pipeline CSV.

Input columns: az_deg, delay_ns, power_dbm (one row per nonzero bin).
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

COLUMNS = ["az_deg", "delay_ns", "power_dbm"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--in", dest="infile", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--vmin", type=float, default=None)
    ap.add_argument("--vmax", type=float, default=None)
    args = ap.parse_args(argv)

    rows = load_csv(args.infile, COLUMNS)
    az = np.array([float(r[0]) for r in rows])
    dl = np.array([float(r[1]) for r in rows])
    p = np.array([float(r[2]) for r in rows])

    az_bins = np.unique(az)
    dl_bins = np.unique(dl)
    grid = np.full((len(dl_bins), len(az_bins)), np.nan)
    ai = np.searchsorted(az_bins, az)
    di = np.searchsorted(dl_bins, dl)
    grid[di, ai] = p

    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=120)
    mesh = ax.pcolormesh(az_bins, dl_bins, grid, shading="nearest",
                         cmap="viridis", vmin=args.vmin, vmax=args.vmax)
    fig.colorbar(mesh, ax=ax, label="power (dBm)")
    ax.set_xlabel("departure azimuth (deg)")
    ax.set_ylabel("delay (ns)")
    ax.set_title(Path(args.infile).stem)
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Software": None})
    print(f"wrote {args.out} ({np.count_nonzero(~np.isnan(grid))} bins)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
