#!/usr/bin/env python3
"""Per-receiver comparison panels of the link statistics: one panel per
statistic, measured and predicted curves across the receiver positions.

Input columns: rx_id, class, lsp, measured, predicted.
"""

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

sys.path.insert(0, str(Path(__file__).resolve().parent))
from _csv_contract import load_csv  # noqa: E402

COLUMNS = ["rx_id", "class", "lsp", "measured", "predicted"]

PANEL_ORDER = ["total_specular_power_dbm", "mean_delay_ns", "delay_spread_ns",
               "mean_azimuth_deg", "azimuth_spread_deg", "diffuse_percent"]

LABELS = {"total_specular_power_dbm": "specular power (dBm)",
          "mean_delay_ns": "mean delay (ns)",
          "delay_spread_ns": "delay spread (ns)",
          "mean_azimuth_deg": "mean azimuth (deg)",
          "azimuth_spread_deg": "azimuth spread (deg)",
          "diffuse_percent": "diffuse share (%)"}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--in", dest="infile", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--vmin", type=float, default=None)
    ap.add_argument("--vmax", type=float, default=None)
    args = ap.parse_args(argv)

    rows = load_csv(args.infile, COLUMNS)
    by_lsp = {}
    for rx_id, cls, lsp, meas, pred in rows:
        by_lsp.setdefault(lsp, []).append((rx_id, float(meas), float(pred)))

    panels = [k for k in PANEL_ORDER if k in by_lsp] or sorted(by_lsp)
    fig, axes = plt.subplots(len(panels), 1, figsize=(8, 2.1 * len(panels)),
                             dpi=120, sharex=True)
    if len(panels) == 1:
        axes = [axes]
    for ax, name in zip(axes, panels):
        entries = sorted(by_lsp[name])
        ids = [e[0] for e in entries]
        ax.plot(ids, [e[1] for e in entries], "o-", color="tab:blue",
                label="measured", ms=4)
        ax.plot(ids, [e[2] for e in entries], "s--", color="tab:green",
                label="predicted", ms=4)
        ax.set_ylabel(LABELS.get(name, name), fontsize=8)
        if args.vmin is not None or args.vmax is not None:
            ax.set_ylim(args.vmin, args.vmax)
        ax.grid(alpha=0.3)
    axes[0].legend(loc="best", fontsize=8)
    axes[-1].tick_params(axis="x", rotation=60, labelsize=7)
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Software": None})
    print(f"wrote {args.out} ({len(panels)} panels)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
