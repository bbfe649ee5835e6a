"""
Small dense matrix kernel used by every other module.

Matrices are plain ``numpy.ndarray`` objects; vectors are 1-D arrays.
All functions are pure.
"""

import logging
from typing import NamedTuple

import numpy as np
import scipy.linalg
from numpy.linalg import LinAlgError

logger = logging.getLogger(__name__)

# --- Tolerances ---

SYMMETRY_TOL = 1e-10
PIVOT_TOL = 1e-12
LYAPUNOV_INCREMENT_TOL = 1e-14
LYAPUNOV_RESIDUAL_TOL = 1e-10
LYAPUNOV_MAX_TERMS = 100_000
SCHUR_MARGIN = 1e-12
STOCHASTIC_TOL = 1e-12
STATIONARY_RESIDUAL_TOL = 1e-12
POWER_ITERATION_MAX = 1_000_000


class MatrixError(ValueError):
    """Raised for malformed matrix input (shape, symmetry, finiteness)."""


class LyapunovDivergenceError(MatrixError):
    """The Stein series does not converge: spectral radius >= 1."""


class StationaryDistributionError(MatrixError):
    """Input is not a stochastic matrix or has no unique stationary law."""


class SymEigExtremes(NamedTuple):
    lambda_min: float
    lambda_max: float


# --- Helpers ---

def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerces nested lists into a finite 2-D float array."""
    try:
        arr = np.array(data, dtype=float)
    except (TypeError, ValueError) as e:
        raise MatrixError(f"{name}: not a numeric array ({e})")
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise MatrixError(f"{name}: expected a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MatrixError(f"{name}: entries must be finite")
    return arr


def _require_square(A: np.ndarray, name: str) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise MatrixError(f"{name} must be square, got shape {A.shape}")


def symmetrize(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    _require_square(P, "P")
    scale = max(1.0, float(np.max(np.abs(P))))
    if np.max(np.abs(P - P.T)) > SYMMETRY_TOL * scale:
        raise MatrixError("matrix is not symmetric within tolerance")
    return 0.5 * (P + P.T)


# --- Norms and exponentials ---

def inf_norm(A) -> float:
    """Induced infinity norm (max absolute row sum); max |entry| for vectors."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        return float(np.max(np.abs(A))) if A.size else 0.0
    return float(np.max(np.sum(np.abs(A), axis=1)))


def mat_exp(A, t: float = 1.0) -> np.ndarray:
    """exp(A t) via scipy's scaling-and-squaring Pade approximant."""
    A = np.asarray(A, dtype=float)
    _require_square(A, "A")
    if not np.isfinite(t):
        raise MatrixError(f"time must be finite, got {t}")
    return scipy.linalg.expm(A * t)


# --- Symmetric matrices ---

def sym_eig_extremes(P) -> SymEigExtremes:
    eigs = np.linalg.eigvalsh(symmetrize(P))
    return SymEigExtremes(float(eigs[0]), float(eigs[-1]))


def is_positive_definite(P) -> bool:
    """True iff a Cholesky factorization exists with every pivot above PIVOT_TOL."""
    try:
        L = np.linalg.cholesky(symmetrize(P))
    except (LinAlgError, MatrixError):
        return False
    return bool(np.all(np.diag(L) ** 2 > PIVOT_TOL))


# --- Discrete Lyapunov ---

def spectral_radius(S) -> float:
    S = np.asarray(S, dtype=float)
    _require_square(S, "S")
    return float(np.max(np.abs(np.linalg.eigvals(S))))


def solve_discrete_lyapunov(S, Q) -> np.ndarray:
    """
    Solves S^T P S - P = -Q, i.e. P = sum_k (S^T)^k Q S^k.

    Raises LyapunovDivergenceError when the series would not converge.
    """
    S = np.asarray(S, dtype=float)
    Q = symmetrize(Q)
    _require_square(S, "S")
    if S.shape != Q.shape:
        raise MatrixError(f"S {S.shape} and Q {Q.shape} must have equal shapes")

    radius = spectral_radius(S)
    if radius >= 1.0 - SCHUR_MARGIN:
        raise LyapunovDivergenceError(f"spectral radius {radius:.6g} >= 1")

    # scipy solves a X a^T - X + q = 0, so pass a = S^T
    P = scipy.linalg.solve_discrete_lyapunov(S.T, Q)
    P = 0.5 * (P + P.T)
    residual = inf_norm(S.T @ P @ S - P + Q)
    if residual > LYAPUNOV_RESIDUAL_TOL * max(1.0, inf_norm(P)):
        P = _stein_series(S, Q)
    return P


def _stein_series(S: np.ndarray, Q: np.ndarray) -> np.ndarray:
    # doubling form of the series: P_{j+1} = P_j + (S^T)^{2^j} P_j S^{2^j}
    P = Q.copy()
    Sk = S.copy()
    for _ in range(LYAPUNOV_MAX_TERMS):
        increment = Sk.T @ P @ Sk
        P = P + increment
        if inf_norm(increment) < LYAPUNOV_INCREMENT_TOL:
            return 0.5 * (P + P.T)
        Sk = Sk @ Sk
    raise LyapunovDivergenceError("Stein series failed to converge")


def is_schur(S) -> bool:
    """True iff solve_discrete_lyapunov(S, I) converges."""
    S = np.asarray(S, dtype=float)
    try:
        solve_discrete_lyapunov(S, np.eye(S.shape[0]))
    except LyapunovDivergenceError:
        return False
    return True


# --- Stationary distributions ---

def _check_stochastic(L: np.ndarray) -> None:
    _require_square(L, "L")
    if np.any(L < -STOCHASTIC_TOL):
        raise StationaryDistributionError("negative transition probability")
    row_sums = L.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > STOCHASTIC_TOL)
    if bad.size:
        raise StationaryDistributionError(f"row {int(bad[0])} sums to {row_sums[bad[0]]:.15g}, expected 1")


def _augmented_null_solve(T: np.ndarray) -> np.ndarray:
    """Solves T pi = 0 with sum(pi) = 1 through the augmented least-squares system."""
    M = T.shape[0]
    aug = np.vstack([T, np.ones((1, M))])
    rhs = np.zeros(M + 1)
    rhs[-1] = 1.0
    pi, _, rank, _ = np.linalg.lstsq(aug, rhs, rcond=None)
    if rank < M:
        raise StationaryDistributionError("singular augmented system: chain is reducible")
    return pi


def stationary_distribution(L) -> np.ndarray:
    """pi with pi L = pi and sum(pi) = 1 for an irreducible row-stochastic L."""
    L = np.asarray(L, dtype=float)
    _check_stochastic(L)
    M = L.shape[0]
    pi = _augmented_null_solve(L.T - np.eye(M))
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()

    if inf_norm(pi @ L - pi) > STATIONARY_RESIDUAL_TOL:
        logger.debug("Linear solve residual too large, falling back to power iteration")
        pi = _power_iteration(L)
    return pi


def _power_iteration(L: np.ndarray) -> np.ndarray:
    # lazy chain (I + L)/2 shares pi and is aperiodic
    lazy = 0.5 * (np.eye(L.shape[0]) + L)
    pi = np.full(L.shape[0], 1.0 / L.shape[0])
    for _ in range(POWER_ITERATION_MAX):
        nxt = pi @ lazy
        if inf_norm(nxt - pi) < STATIONARY_RESIDUAL_TOL * 1e-2:
            return nxt / nxt.sum()
        pi = nxt
    raise StationaryDistributionError("power iteration did not converge")


def generator_stationary_distribution(G) -> np.ndarray:
    """pi with pi G = 0 and sum(pi) = 1 for an irreducible generator G."""
    G = np.asarray(G, dtype=float)
    _require_square(G, "G")
    pi = _augmented_null_solve(G.T)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()
