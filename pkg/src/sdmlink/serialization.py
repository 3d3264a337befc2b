"""
Structured-text (JSON) encoding of complex arrays.

A matrix is stored as ``{"shape": [...], "data": [[re, im], ...]}`` with
``data`` in row-major (C) order. Channel realizations, equalizer taps and
crosstalk matrices all use this layout.
"""

from __future__ import annotations

import json

import numpy as np


def matrix_to_json(a) -> dict:
    a = np.asarray(a, dtype=complex)
    flat = a.ravel(order="C")
    return {"shape": list(a.shape), "data": np.stack([flat.real, flat.imag], axis=1).tolist()}


def matrix_from_json(d: dict) -> np.ndarray:
    data = np.asarray(d["data"], dtype=float).reshape(-1, 2)
    return (data[:, 0] + 1j * data[:, 1]).reshape(d["shape"], order="C")


def dump_matrices(path, **arrays) -> None:
    """Write named arrays to ``path`` as one JSON object."""
    with open(path, "w") as fh:
        json.dump({k: matrix_to_json(v) for k, v in arrays.items()}, fh, indent=1, sort_keys=True)


def load_matrices(path) -> dict:
    with open(path) as fh:
        raw = json.load(fh)
    return {k: matrix_from_json(v) for k, v in raw.items()}
