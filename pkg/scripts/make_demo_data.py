#!/usr/bin/env python3
"""Regenerate the synthetic demo datasets under data/.

Both files are artificial stand-ins for the kinds of longitudinal studies the
package targets; they are generated from fixed seeds so reruns are
byte-identical.
"""

import csv
import pathlib

import numpy as np

OUT = pathlib.Path(__file__).resolve().parent.parent / "data"


def write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def growth_curves():
    """Eight subjects, log-scale response flattening after an intervention."""
    rng = np.random.default_rng(2024_1)
    rows = []
    times = np.arange(0, 150, 7.0)
    for subj in range(1, 9):
        offset = rng.normal(0.0, 0.3)
        for t in times:
            if rng.uniform() < 0.08:
                continue  # the occasional missed measurement
            mean = 0.35 + 0.032 * t - 0.020 * max(t - 32.0, 0.0)
            rows.append([f"{t:.1f}", f"m{subj}",
                         f"{mean + offset + rng.normal(0, 0.12):.6f}"])
    write(OUT / "growth_curves_synthetic.csv", ["day", "subject", "y"], rows)


def treatment_trial():
    """Three treatment arms, patients nested in arms, unbalanced visits."""
    rng = np.random.default_rng(2024_2)
    rows = []
    weeks = np.array([0, 4, 8, 12, 24, 36, 48, 60, 72], dtype=float)
    arms = {"PP": (16.0, -0.010), "AP": (16.0, -0.055), "AM": (16.0, -0.080)}
    pid = 0
    for arm, (level, slope) in arms.items():
        for _ in range(6):
            pid += 1
            offset = rng.normal(0.0, 1.2)
            for wk in weeks:
                if rng.uniform() < 0.15:
                    continue
                mean = level + slope * wk + 1.5 * np.sin(wk / 20.0)
                rows.append([f"{wk:.0f}", arm, f"p{pid:02d}",
                             f"{mean + offset + rng.normal(0, 0.9):.6f}"])
    write(OUT / "afcr_like_synthetic.csv", ["week", "treatment", "patient", "y"],
          rows)


if __name__ == "__main__":
    OUT.mkdir(exist_ok=True)
    growth_curves()
    treatment_trial()
    print(f"wrote {OUT / 'growth_curves_synthetic.csv'}")
    print(f"wrote {OUT / 'afcr_like_synthetic.csv'}")
