"""Minimal dense linear algebra with deterministic seeded randomness.

Matrices are plain float64 numpy arrays. The RNG algorithm is part of the
external contract: numpy PCG64, identified as ``pcg64-numpy-v1``; identical
seeds produce identical streams across runs and platforms.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ContractViolation, SingularMatrixError

RNG_ALGORITHM = "pcg64-numpy-v1"


class Rng:
    """Deterministic random generator (PCG64), single-owner mutable state."""

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self.seed_sequence = seed
        else:
            self.seed_sequence = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.PCG64(self.seed_sequence))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(ss) for ss in self.seed_sequence.spawn(n)]


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    return a


def require_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{what} contains non-finite entries")
    return a


def mat_mul(a, b) -> np.ndarray:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"dimension mismatch: {a.shape} x {b.shape}")
    return require_finite(a @ b, "product")


def _pivot_of_failure(a: np.ndarray) -> int:
    """Locate the first non-positive pivot with a plain Cholesky sweep."""
    n = a.shape[0]
    m = a.copy()
    for j in range(n):
        pivot = m[j, j] - np.dot(m[j, :j], m[j, :j])
        if pivot <= 0.0 or not np.isfinite(pivot):
            return j
        m[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            m[j + 1:, j] = (m[j + 1:, j] - m[j + 1:, :j] @ m[j, :j]) / m[j, j]
    return n - 1


def solve_spd(a, b) -> np.ndarray:
    """Solve a @ X = b for symmetric positive definite a via Cholesky."""
    a, b_m = _as_matrix(a), _as_matrix(b)
    if a.shape[0] != a.shape[1]:
        raise ContractViolation(f"solve_spd needs a square matrix, got {a.shape}")
    if a.shape[0] != b_m.shape[0]:
        raise ContractViolation(f"rhs rows {b_m.shape[0]} != system size {a.shape[0]}")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularMatrixError(_pivot_of_failure(a)) from None
    x = scipy.linalg.cho_solve(factor, b_m, check_finite=False)
    x = x if np.asarray(b).ndim > 1 else x[:, 0]
    return require_finite(np.asarray(x), "solution")


def sym_eigvals(a) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, descending."""
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ContractViolation(f"sym_eigvals needs a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T)) > 1e-10:
        raise ContractViolation("matrix is asymmetric beyond 1e-10")
    vals = np.linalg.eigvalsh(a)
    return vals[::-1].copy()


def gaussian_matrix(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ContractViolation("std must be non-negative")
    return rng.gen.normal(mean, std, size=(rows, cols)).astype(np.float64)
