"""CSV import/export with fixed column schemas and a header row.

Numbers are written with ``repr``-exact ``%.17g`` formatting, which is
independent of the process locale.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMAS = {
    "phase": ("time_s", "phase_rad"),
    "psd": ("freq_hz", "psd"),
    "mvar": ("tau_s", "mdev"),
    "drives": ("time_s", "fast_v", "slow_v"),
    "sa_trace": ("freq_hz", "power_dbm"),
}


class SchemaError(ValueError):
    """CSV header does not match the expected columns."""


def write_columns(path: str | Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> Path:
    path = Path(path)
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")
    return path


def write_rows(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="ascii", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
    return path


def read_header(path: str | Path) -> tuple[str, ...]:
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
    return tuple(c.strip() for c in first.strip().split(","))


def read_columns(path: str | Path, header: Sequence[str]) -> list[np.ndarray]:
    """Read a numeric CSV whose header must equal ``header``."""
    found = read_header(path)
    if found != tuple(header):
        raise SchemaError(f"{path}: expected columns {','.join(header)}, found {','.join(found)}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric data ({exc})") from exc
    if data.shape[1] != len(header):
        raise SchemaError(f"{path}: expected {len(header)} columns per row")
    return [data[:, k] for k in range(data.shape[1])]
