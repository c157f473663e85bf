"""Report rendering: CSV tables and the polar mIoU sweep figure.

The polar figure places one marker per (angle, scale) at radius = scale
factor, colored by mIoU through a 3-stop linear colormap (dark red at 0,
pale at 0.5, dark blue at 1).  Rings are drawn at each evaluated scale
factor.  Output is standalone SVG on a fixed 800x800 viewBox, written
next to the CSV it visualizes.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import LinearSegmentedColormap

MIOU_CMAP = LinearSegmentedColormap.from_list("miou", ["#b2182b", "#f7f7f7", "#2166ac"])


def format_value(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    """RFC-4180-style CSV with a mandatory header row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def polar_figure(rows, scales, out_path) -> None:
    """Polar mIoU scatter: rows of (angle_deg, scale, miou), rings at scales."""
    rows = list(rows)
    # SVG coordinates are points (72/in); 800/72 in gives the 800x800 viewBox.
    side = 800.0 / 72.0
    fig, ax = plt.subplots(figsize=(side, side), subplot_kw={"projection": "polar"})
    if rows:
        angles = np.radians([r[0] for r in rows])
        radii = np.array([r[1] for r in rows])
        scores = np.array([r[2] for r in rows])
        points = ax.scatter(
            angles, radii, c=scores, cmap=MIOU_CMAP, vmin=0.0, vmax=1.0, s=70,
            edgecolors="black", linewidths=0.4,
        )
        fig.colorbar(points, ax=ax, shrink=0.75, label="mIoU")
    ring_radii = sorted(set(float(s) for s in scales))
    if ring_radii:
        ax.set_rgrids(ring_radii, labels=[f"{r:g}" for r in ring_radii])
        ax.set_rlim(0.0, 1.1 * max(ring_radii))
    ax.set_title("mIoU by rotation angle and scale factor")
    fig.savefig(out_path, format="svg")
    plt.close(fig)
