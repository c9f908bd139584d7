"""Dense linear-algebra and signal primitives shared by the merging engine.

Matrices are plain 2-D ``numpy`` arrays of ``float64`` in C (row-major) order.
All accumulation happens in double precision so that score comparisons, and
therefore merge decisions, do not flip across platforms.  Everything in this
module is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a C-contiguous float64 matrix, checking finiteness.

    ``rows``/``cols`` are optional shape assertions.
    """
    mat = np.ascontiguousarray(values, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {mat.shape}")
    if rows is not None and mat.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {mat.shape[0]}")
    if cols is not None and mat.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {mat.shape[1]}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix contains non-finite values")
    return mat


def cosine_similarity(a, b) -> float:
    """Cosine similarity clamped to [-1, 1].

    A zero-norm input yields 0.0 rather than an error: all-zero padding
    tokens are degenerate but must not abort a denoising run.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(float(np.dot(a, b)) / (na * nb), -1.0, 1.0))


def unit_rows(mat: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm; zero-norm rows stay zero (cosine 0 convention)."""
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return mat / safe


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    sims = unit_rows(a) @ unit_rows(b).T
    return np.clip(sims, -1.0, 1.0)


def softmax(v) -> np.ndarray:
    """Shift-invariant softmax; output is a probability vector for finite input."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("softmax expects a 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    shifted = v - np.max(v)
    e = np.exp(shifted)
    return e / np.sum(e)


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending; ties break to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("top_k_indices expects a 1-D vector")
    if k < 0 or k > scores.shape[0]:
        raise ValueError(f"k={k} out of range for {scores.shape[0]} scores")
    # lexsort: last key is primary.  Ascending index is the tie-break.
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k].copy()


@dataclass(frozen=True)
class SubbandNorms:
    """L2 norms of the four single-level Haar subbands of a 2-D field."""

    ll: float
    lh: float
    hl: float
    hh: float

    def energy(self) -> float:
        return self.ll**2 + self.lh**2 + self.hl**2 + self.hh**2


def _haar_blocks(field: np.ndarray):
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError("haar_dwt2 expects a 2-D field")
    rows, cols = field.shape
    if rows % 2 or cols % 2:
        raise ValueError(f"haar_dwt2 needs even dimensions, got {rows}x{cols}")
    a = field[0::2, 0::2]
    b = field[0::2, 1::2]
    c = field[1::2, 0::2]
    d = field[1::2, 1::2]
    return a, b, c, d


def haar_dwt2(field: np.ndarray):
    """Single-level orthonormal 2-D Haar transform.

    Returns ``(ll, lh, hl, hh)``, each of shape (rows/2, cols/2).  The
    orthonormal filters (1/sqrt(2) per axis, i.e. an overall factor 1/2 on the
    2x2 block combinations) make Parseval's identity exact: subband energy
    equals input energy.  A constant field c maps to ll = 2c with zero detail.
    """
    a, b, c, d = _haar_blocks(field)
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0  # detail across the width
    hl = (a + b - c - d) / 2.0  # detail across the height
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def haar_idwt2(ll: np.ndarray, lh: np.ndarray, hl: np.ndarray, hh: np.ndarray) -> np.ndarray:
    """Inverse of :func:`haar_dwt2`; reconstructs the field exactly."""
    ll, lh, hl, hh = (np.asarray(x, dtype=np.float64) for x in (ll, lh, hl, hh))
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ValueError("subband shapes differ")
    rows, cols = ll.shape
    out = np.empty((rows * 2, cols * 2), dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def subband_norms(field: np.ndarray) -> SubbandNorms:
    """L2 norm of each Haar subband of ``field``."""
    ll, lh, hl, hh = haar_dwt2(field)
    return SubbandNorms(
        ll=float(np.linalg.norm(ll)),
        lh=float(np.linalg.norm(lh)),
        hl=float(np.linalg.norm(hl)),
        hh=float(np.linalg.norm(hh)),
    )
