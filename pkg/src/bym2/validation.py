"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .graph import Graph


def check_counts(y) -> np.ndarray:
    y = column_or_1d(check_array(np.asarray(y), ensure_2d=False, dtype=float), warn=True)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must contain non-negative integer counts")
    return y


def check_exposure(E, n: int) -> np.ndarray:
    if E is None:
        raise ValueError("expected counts (exposure) are required")
    E = column_or_1d(check_array(np.asarray(E), ensure_2d=False, dtype=float))
    if E.shape[0] != n:
        raise ValueError(f"exposure has {E.shape[0]} entries, expected {n}")
    if np.any(E <= 0):
        raise ValueError("expected counts must be positive")
    return E


def check_covariates(X, n: int) -> np.ndarray | None:
    """``None`` or an (n, 0) array mean no covariates."""
    if X is None:
        return None
    X = check_array(X, dtype=float, ensure_min_features=0)
    if X.shape[0] != n:
        raise ValueError(f"X has {X.shape[0]} rows, expected {n}")
    return X if X.shape[1] else None


def check_graph(graph, n: int) -> Graph:
    if not isinstance(graph, Graph):
        raise TypeError("graph must be a bym2.graph.Graph")
    if graph.n_regions != n:
        raise ValueError(f"graph has {graph.n_regions} regions but the data has {n}")
    return graph


def check_unit_interval(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value
