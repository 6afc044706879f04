"""Input checks for the estimator interface."""
from __future__ import annotations

import numpy as np

from .chem import parse_smiles
from .errors import DataError, SmilesError


def check_smiles_array(X, parse: bool = True) -> tuple[str, ...]:
    """1-D sequence of SMILES strings; optionally verify each one parses."""
    arr = np.asarray(X, dtype=object)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D sequence of SMILES strings, got shape {arr.shape}")
    if len(arr) == 0:
        raise ValueError("no molecules given")
    out = []
    for i, s in enumerate(arr):
        if not isinstance(s, str):
            raise TypeError(f"entry {i} is {type(s).__name__}, not a SMILES string")
        if parse:
            try:
                parse_smiles(s)
            except SmilesError as exc:
                raise DataError(f"entry {i}: {exc}") from exc
        out.append(s)
    return tuple(out)


def check_label_matrix(Y, n_rows: int) -> np.ndarray:
    """Float label matrix with entries 0, 1 or nan; a 1-D vector becomes one column."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2:
        raise ValueError(f"labels must be 1-D or 2-D, got {Y.ndim}-D")
    if Y.shape[0] != n_rows:
        raise ValueError(f"{n_rows} molecules but {Y.shape[0]} label rows")
    present = Y[~np.isnan(Y)]
    if not np.all((present == 0) | (present == 1)):
        raise ValueError("labels must be 0, 1 or nan")
    return Y


def check_binary_labels(y, n_rows: int) -> np.ndarray:
    """Complete binary label vector containing both classes."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != n_rows:
        raise ValueError(f"{n_rows} molecules but {len(y)} labels")
    if np.isnan(y).any() or not np.all((y == 0) | (y == 1)):
        raise ValueError("support labels must all be 0 or 1")
    if len(np.unique(y)) < 2:
        raise ValueError("support set needs at least one active and one inactive molecule")
    return y
