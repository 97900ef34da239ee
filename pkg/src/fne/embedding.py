"""Pooling and cosine-similarity primitives.

Everything here works in float64 regardless of the input dtype, because the
false-negative posterior downstream is sensitive to similarity rounding.
"""

from typing import Sequence

import numpy as np

from fne.errors import DegenerateEmbeddingError, MalformedInputError


def _as_matrix(vectors, name: str) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise MalformedInputError(f"{name} must be a list of vectors")
    return arr


def average_pool(tokens) -> np.ndarray:
    """Mean of a set of token (patch or word) vectors.

    Args:
        tokens: array-like of shape (n_tokens, d).

    Returns:
        The elementwise mean, shape (d,).
    """
    arr = np.asarray(tokens, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise MalformedInputError("token set must be a nonempty (n, d) array")
    return arr.mean(axis=0)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MalformedInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 1:
        raise MalformedInputError("cosine_similarity expects two vectors")
    return float(similarity_matrix(a[None, :], b[None, :])[0, 0])


def row_norms(x: np.ndarray, name: str = "vectors") -> np.ndarray:
    """Euclidean norm of each row, rejecting zero or non-finite rows."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x, optimize=False))
    bad = np.flatnonzero(~(norms > 0.0) | ~np.isfinite(norms))
    if bad.size:
        raise DegenerateEmbeddingError(
            f"{name}[{int(bad[0])}] has zero or non-finite norm", index=int(bad[0])
        )
    return norms


def normalize_rows(x, name: str = "vectors") -> np.ndarray:
    x = _as_matrix(x, name)
    return x / row_norms(x, name)[:, None]


def similarity_matrix(queries: Sequence, candidates: Sequence) -> np.ndarray:
    """Pairwise cosine similarities, shape (len(queries), len(candidates)).

    Entry ``(i, j)`` is ``cosine_similarity(queries[i], candidates[j])``.
    An empty candidate list yields a zero-column matrix.
    """
    q = _as_matrix(queries, "queries")
    if len(candidates) == 0:
        return np.zeros((q.shape[0], 0))
    c = _as_matrix(candidates, "candidates")
    if q.shape[1] != c.shape[1]:
        raise MalformedInputError(
            f"dimension mismatch: queries have d={q.shape[1]}, candidates d={c.shape[1]}"
        )
    qn = row_norms(q, "queries")
    cn = row_norms(c, "candidates")
    # Per-pair evaluation keeps entries identical to cosine_similarity().
    dots = np.einsum("id,jd->ij", q, c, optimize=False)
    return np.clip(dots / np.multiply.outer(qn, cn), -1.0, 1.0)
