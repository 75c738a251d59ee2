"""Matrix and system persistence.

Two matrix formats are supported: headerless CSV (one row per line) and a
JSON object ``{"rows": n, "cols": m, "data": [...]}`` with row-major data.
A plant is a JSON object with one matrix object per key
``A, B, Bv, C, Dgu, Dgv``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .lti import StateSpaceSystem

SYSTEM_KEYS = ("A", "B", "Bv", "C", "Dgu", "Dgv")


def matrix_to_obj(M: np.ndarray) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {
        "rows": int(M.shape[0]),
        "cols": int(M.shape[1]),
        "data": [float(x) for x in M.ravel(order="C")],
    }


def matrix_from_obj(obj: dict) -> np.ndarray:
    rows, cols = int(obj["rows"]), int(obj["cols"])
    data = np.asarray(obj["data"], dtype=float)
    if data.size != rows * cols:
        raise ValueError(
            f"matrix object claims {rows}x{cols} but carries {data.size} entries"
        )
    return data.reshape(rows, cols)


def save_matrix_csv(path, M: np.ndarray) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [",".join(repr(float(x)) for x in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    M = np.loadtxt(path, delimiter=",", ndmin=2)
    return np.atleast_2d(M)


def save_matrix_json(path, M: np.ndarray) -> None:
    Path(path).write_text(json.dumps(matrix_to_obj(M), indent=2) + "\n")


def load_matrix_json(path) -> np.ndarray:
    return matrix_from_obj(json.loads(Path(path).read_text()))


def load_matrix(path) -> np.ndarray:
    """Load a matrix, picking the format from the file suffix."""
    if str(path).endswith(".csv"):
        return load_matrix_csv(path)
    return load_matrix_json(path)


def save_matrix(path, M: np.ndarray) -> None:
    if str(path).endswith(".csv"):
        save_matrix_csv(path, M)
    else:
        save_matrix_json(path, M)


def system_to_obj(sys: StateSpaceSystem) -> dict:
    return {k: matrix_to_obj(getattr(sys, k)) for k in SYSTEM_KEYS}


def system_from_obj(obj: dict) -> StateSpaceSystem:
    missing = [k for k in SYSTEM_KEYS if k not in obj]
    if missing:
        raise ValueError(f"system object missing keys: {missing}")
    return StateSpaceSystem(**{k: matrix_from_obj(obj[k]) for k in SYSTEM_KEYS})


def save_system(path, sys: StateSpaceSystem) -> None:
    Path(path).write_text(json.dumps(system_to_obj(sys), indent=2) + "\n")


def load_system(path) -> StateSpaceSystem:
    return system_from_obj(json.loads(Path(path).read_text()))
