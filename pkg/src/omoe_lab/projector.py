"""Recursive-least-squares orthogonal projector.

Each guarded weight layer carries a square matrix P, initialized to the
identity and shrunk by rank-one updates so that P attenuates directions the
layer has already absorbed. With a constant regularizer ``alpha`` the
recursion computes exactly ``alpha * (A A^T + alpha I)^-1`` for the stacked
input columns A; ``direct_projector`` is that closed form and serves as the
brute-force oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .linalg import require_finite, solve_spd, sym_eigvals


@dataclass
class OrthoProjector:
    d: int
    alpha0: float = 1e-3
    lam: float = 0.9
    n_total: int = 1
    P: np.ndarray = field(default=None)  # type: ignore[assignment]
    updates_applied: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ContractViolation("projector dimension must be >= 1")
        if self.alpha0 <= 0:
            raise ContractViolation("alpha0 must be positive")
        if not (0 < self.lam <= 1):
            raise ContractViolation("lambda must lie in (0, 1]")
        if self.P is None:
            self.P = np.eye(self.d)

    def alpha_at(self, i: int) -> float:
        """Decayed regularizer alpha0 * lam^(i / n_total) for batch index i."""
        if self.n_total == 0:
            raise ContractViolation("n_total must be nonzero for the decay schedule")
        if not (0 <= i <= self.n_total):
            raise ContractViolation(f"batch index {i} outside [0, {self.n_total}]")
        return self.alpha0 * self.lam ** (i / self.n_total)

    def rls_update(self, xbar: np.ndarray, alpha: float) -> None:
        """Rank-one shrink: P <- P - (P x)(x^T P) / (alpha + x^T P x).

        A zero input is a no-op (zero gain). Symmetry is preserved by
        construction since the subtracted term is v v^T / denom with v = P x.
        """
        if alpha <= 0:
            raise ContractViolation("alpha must be positive")
        x = np.asarray(xbar, dtype=np.float64).ravel()
        if x.shape[0] != self.d:
            raise ContractViolation(f"input dim {x.shape[0]} != projector dim {self.d}")
        require_finite(x, "projector input")
        v = self.P @ x
        denom = alpha + float(x @ v)
        self.P -= np.outer(v, v) / denom
        self.updates_applied += 1

    def effective_rank(self, tau: float) -> int:
        """Count of eigenvalues strictly above tau: remaining capacity."""
        if not (0 < tau < 1):
            raise ContractViolation("tau must lie in (0, 1)")
        return int(np.sum(sym_eigvals(self.P) > tau))

    def copy(self) -> "OrthoProjector":
        return OrthoProjector(self.d, self.alpha0, self.lam, self.n_total,
                              self.P.copy(), self.updates_applied)


def new_projector(d: int, alpha0: float = 1e-3, lam: float = 0.9, n_total: int = 1) -> OrthoProjector:
    return OrthoProjector(d=d, alpha0=alpha0, lam=lam, n_total=n_total)


def direct_projector(a: np.ndarray, alpha: float) -> np.ndarray:
    """Closed form I - A (alpha I + A^T A)^-1 A^T for columns A, fixed alpha."""
    if alpha <= 0:
        raise ContractViolation("alpha must be positive")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    d, m = a.shape
    if m == 0:
        return np.eye(d)
    inner = alpha * np.eye(m) + a.T @ a
    x = solve_spd(inner, a.T)
    return np.eye(d) - a @ x
