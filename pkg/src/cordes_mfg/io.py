"""CSV and JSON(-lines) readers and writers for grid fields and run records.

Field CSVs have the header ``i,j,x,y,value`` with one row per interior node
in flat-index order; floats are written with 17 significant digits so a
write/read cycle reproduces the array bit for bit.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ContractViolation

__all__ = [
    "SCHEMA_VERSION",
    "write_field_csv",
    "read_field_csv",
    "write_policy_csv",
    "read_policy_csv",
    "write_weights_csv",
    "read_weights_csv",
    "write_table_csv",
    "to_jsonable",
    "write_json",
    "append_jsonl",
]

SCHEMA_VERSION = "1.0"
FLOAT_FMT = "%.17g"


def _node_columns(grid):
    idx = grid.indices
    pts = grid.points
    return idx[:, 0], idx[:, 1], pts[:, 0], pts[:, 1]


def write_field_csv(path, grid, values, column="value"):
    values = grid.check_field(values, column)
    i, j, x, y = _node_columns(grid)
    with open(path, "w", newline="") as fh:
        fh.write(f"i,j,x,y,{column}\n")
        for row in zip(i, j, x, y, values):
            fh.write(f"{row[0]},{row[1]},{FLOAT_FMT % row[2]},{FLOAT_FMT % row[3]},{FLOAT_FMT % row[4]}\n")


def _read_node_table(path, grid, ncols):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (grid.size, ncols):
        raise ContractViolation(f"{path.name}: expected {grid.size} rows of {ncols} columns, got {data.shape}")
    ij = data[:, :2].astype(int)
    if not np.array_equal(ij, grid.indices):
        raise ContractViolation(f"{path.name}: node indices do not match the grid")
    return data


def read_field_csv(path, grid) -> np.ndarray:
    data = _read_node_table(path, grid, 5)
    if not np.allclose(data[:, 2:4], grid.points, rtol=0, atol=1e-12):
        raise ContractViolation(f"{Path(path).name}: node coordinates do not match the grid")
    return data[:, 4].copy()


def write_policy_csv(path, grid, policy):
    policy = np.asarray(policy, dtype=int)
    i, j, x, y = _node_columns(grid)
    with open(path, "w", newline="") as fh:
        fh.write("i,j,x,y,control\n")
        for row in zip(i, j, x, y, policy):
            fh.write(f"{row[0]},{row[1]},{FLOAT_FMT % row[2]},{FLOAT_FMT % row[3]},{row[4]}\n")


def read_policy_csv(path, grid) -> np.ndarray:
    return _read_node_table(path, grid, 5)[:, 4].astype(int)


def write_weights_csv(path, grid, weights):
    """Rows ``node_i, node_j, k, w`` for every node and control."""
    weights = np.asarray(weights, dtype=float)
    idx = grid.indices
    with open(path, "w", newline="") as fh:
        fh.write("node_i,node_j,k,w\n")
        for p in range(grid.size):
            for k in range(weights.shape[1]):
                fh.write(f"{idx[p, 0]},{idx[p, 1]},{k},{FLOAT_FMT % weights[p, k]}\n")


def read_weights_csv(path, grid, K) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (grid.size * K, 4):
        raise ContractViolation(f"{path.name}: expected {grid.size * K} rows, got {data.shape[0]}")
    w = np.zeros((grid.size, K))
    flat = data[:, 0].astype(int) * grid.n + data[:, 1].astype(int)
    ks = data[:, 2].astype(int)
    if ks.min() < 0 or ks.max() >= K or flat.min() < 0 or flat.max() >= grid.size:
        raise ContractViolation(f"{path.name}: node or control index out of range")
    w[flat, ks] = data[:, 3]
    return w


def write_table_csv(path, header, rows):
    """Plain CSV; floats with 17 significant digits, ``nan`` for missing values."""

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return FLOAT_FMT % v
        return str(v).replace(",", ";").replace("\n", " ")

    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def append_jsonl(path, records):
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(to_jsonable(rec), sort_keys=True) + "\n")
