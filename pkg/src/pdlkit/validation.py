"""Input validation helpers shared by the estimators and pipeline ops."""

from __future__ import annotations

import numpy as np


def check_token_matrix(X, vocab_size: int | None = None) -> np.ndarray:
    """Validate a (n_windows, length) integer token-id matrix."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d token matrix, got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        raise ValueError(f"token ids must be integers, got dtype {X.dtype}")
    if X.size and X.min() < 0:
        raise ValueError("token ids must be non-negative")
    if vocab_size is not None and X.size and X.max() >= vocab_size:
        raise ValueError(f"token id {int(X.max())} out of range for vocab size {vocab_size}")
    return X


def check_embeddings(X) -> np.ndarray:
    """Validate a (n, dim) float embedding matrix with finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d embedding matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("embeddings contain non-finite values")
    return X


def check_prob_vector(p, atol: float = 1e-6) -> np.ndarray:
    """Validate a probability vector: non-negative, sums to 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a 1-d probability vector, got shape {p.shape}")
    if p.size and (p.min() < -atol or abs(p.sum() - 1.0) > atol):
        raise ValueError("not a probability vector")
    return p
