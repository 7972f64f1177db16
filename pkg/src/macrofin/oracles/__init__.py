"""Independent non-neural reference solvers and comparison metrics."""

import numpy as np

from .cache import OracleCache, cache_key


def l2_rel_error(pred: np.ndarray, ref: np.ndarray) -> float:
    """||pred - ref||_2 / ||ref||_2 over matching grids."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"grid shapes differ: {pred.shape} vs {ref.shape}")
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ZeroDivisionError("reference norm is zero")
    return float(np.linalg.norm(pred - ref)) / denom


__all__ = ["l2_rel_error", "OracleCache", "cache_key"]
