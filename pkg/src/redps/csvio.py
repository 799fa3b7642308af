"""Deterministic CSV helpers shared by the record/fluid/stability writers."""

from __future__ import annotations

import csv


def fmt(x) -> str:
    """Stable float formatting so reruns produce byte-identical files."""
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
