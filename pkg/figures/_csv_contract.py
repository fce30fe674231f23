"""Shared loader for the pipeline CSV contracts.

Files carry an optional leading '#' provenance line; the header must match
the documented columns exactly, and any mismatch exits naming the column.
"""

from __future__ import annotations

import csv
import sys


def load_csv(path, expected_columns):
    try:
        with open(path) as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        sys.exit(f"cannot read {path}: {exc}")
    if not rows:
        sys.exit(f"{path}: empty file")
    header, data = rows[0], rows[1:]
    expected = list(expected_columns)
    for col in expected:
        if col not in header:
            sys.exit(f"{path}: missing column {col!r}")
    for col in header:
        if col not in expected:
            sys.exit(f"{path}: unexpected column {col!r}")
    idx = [header.index(c) for c in expected]
    return [[row[i] for i in idx] for row in data]


def floats(rows, *cols):
    return [tuple(float(r[c]) for c in cols) for r in rows]
