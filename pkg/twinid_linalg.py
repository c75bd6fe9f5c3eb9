#!/usr/bin/env python3
"""
Compact banded and Kronecker linear algebra.

- SymTridiagonal: analytic precision of the exponential (Gauss-Markov) kernel,
  solved with the Thomas sweep.
- BlockTridiagonal: precision of C_t kron C_x when C_t^-1 is tridiagonal,
  factored block by block (no pivoting; SPD is a precondition).
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from twinid_shared import L_MIN, GridError, NotPositiveDefiniteError, ParameterDomainError, njit


@dataclass(frozen=True)
class SymTridiagonal:
    d: np.ndarray   # main diagonal, length m
    c: np.ndarray   # off-diagonal, length m - 1

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).ravel()
        c = np.asarray(self.c, dtype=float).ravel()
        if c.size != max(d.size - 1, 0):
            raise ValueError(f"off-diagonal length {c.size} does not match diagonal length {d.size}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "c", c)

    @property
    def size(self) -> int:
        return self.d.size

    def to_dense(self) -> np.ndarray:
        return np.diag(self.d) + np.diag(self.c, 1) + np.diag(self.c, -1)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = self.d * v
        out[:-1] += self.c * v[1:]
        out[1:] += self.c * v[:-1]
        return out


@dataclass(frozen=True)
class BlockTridiagonal:
    D: np.ndarray   # (m, n, n) symmetric diagonal blocks
    C: np.ndarray   # (m - 1, n, n) sub-diagonal blocks, C[k] sits at block (k + 1, k)

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if D.ndim != 3 or D.shape[1] != D.shape[2]:
            raise ValueError("diagonal blocks must be an (m, n, n) array")
        m, n, _ = D.shape
        if m > 1 and C.shape != (m - 1, n, n):
            raise ValueError(f"sub-diagonal blocks must have shape {(m - 1, n, n)}, got {C.shape}")
        if m == 1:
            C = np.zeros((0, n, n))
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "C", C)

    @property
    def n_blocks(self) -> int:
        return self.D.shape[0]

    @property
    def block_size(self) -> int:
        return self.D.shape[1]

    def add_diagonal(self, diag: np.ndarray) -> "BlockTridiagonal":
        """Return M + diag(w) for a length m * n vector w (time-major)."""
        w = np.asarray(diag, dtype=float).reshape(self.n_blocks, self.block_size)
        D = self.D.copy()
        idx = np.arange(self.block_size)
        D[:, idx, idx] += w
        return BlockTridiagonal(D, self.C)

    def to_dense(self) -> np.ndarray:
        m, n = self.n_blocks, self.block_size
        out = np.zeros((m * n, m * n))
        for k in range(m):
            out[k * n:(k + 1) * n, k * n:(k + 1) * n] = self.D[k]
        for k in range(m - 1):
            out[(k + 1) * n:(k + 2) * n, k * n:(k + 1) * n] = self.C[k]
            out[k * n:(k + 1) * n, (k + 1) * n:(k + 2) * n] = self.C[k].T
        return out


@dataclass(frozen=True)
class BlockCholeskyFactor:
    L: np.ndarray   # (m, n, n) lower-triangular diagonal blocks
    E: np.ndarray   # (m - 1, n, n) sub-diagonal blocks

    @property
    def n_blocks(self) -> int:
        return self.L.shape[0]

    @property
    def block_size(self) -> int:
        return self.L.shape[1]

    def to_dense(self) -> np.ndarray:
        """Dense lower block-bidiagonal factor L with M = L L^T."""
        m, n = self.n_blocks, self.block_size
        out = np.zeros((m * n, m * n))
        for k in range(m):
            out[k * n:(k + 1) * n, k * n:(k + 1) * n] = self.L[k]
        for k in range(m - 1):
            out[(k + 1) * n:(k + 2) * n, k * n:(k + 1) * n] = self.E[k]
        return out


# --- Exponential kernel precision ---

def _exp_kernel_steps(t_coords: Sequence[float], l_corr: float) -> np.ndarray:
    t = np.asarray(t_coords, dtype=float).ravel()
    if t.size == 0:
        raise GridError("t_coords must not be empty")
    if l_corr is None or not np.isfinite(l_corr) or l_corr <= L_MIN:
        raise ParameterDomainError(
            f"l_corr={l_corr} is at or below the IID threshold {L_MIN}; use the independent path")
    dt = np.diff(t)
    if np.any(dt <= 0.0):
        raise GridError("t_coords must be strictly increasing for the exponential precision")
    return dt / l_corr


def exp_kernel_precision(t_coords: Sequence[float], scale: Sequence[float], l_corr: float) -> SymTridiagonal:
    """Exact inverse of Sigma_ij = s_i s_j exp(-|t_i - t_j| / l_corr).

    With a_k = exp(-(t_k - t_{k-1}) / l) and q_k = 1 / (1 - a_k^2):
        d_1 = q_2 / s_1^2,  d_m = q_m / s_m^2,
        d_i = (q_i + q_{i+1} - 1) / s_i^2,
        c_i = -a_{i+1} q_{i+1} / (s_i s_{i+1}).
    """
    steps = _exp_kernel_steps(t_coords, l_corr)
    s = np.broadcast_to(np.asarray(scale, dtype=float), (steps.size + 1,))
    if np.any(s <= 0.0):
        raise ParameterDomainError("scale factors must be strictly positive")
    if steps.size == 0:
        return SymTridiagonal(1.0 / s ** 2, np.zeros(0))

    a = np.exp(-steps)
    q = 1.0 / -np.expm1(-2.0 * steps)      # 1 / (1 - a^2)
    d = np.empty(steps.size + 1)
    d[0] = q[0]
    d[-1] = q[-1]
    d[1:-1] = q[:-1] + q[1:] - 1.0
    d /= s ** 2
    c = -a * q / (s[:-1] * s[1:])
    return SymTridiagonal(d, c)


def exp_kernel_logdet(t_coords: Sequence[float], scale: Sequence[float], l_corr: float) -> float:
    """log|Sigma| of the scaled exponential covariance (Markov factorization)."""
    steps = _exp_kernel_steps(t_coords, l_corr)
    s = np.broadcast_to(np.asarray(scale, dtype=float), (steps.size + 1,))
    return float(2.0 * np.sum(np.log(s)) + np.sum(np.log(-np.expm1(-2.0 * steps))))


def iid_precision(scale: Sequence[float]) -> SymTridiagonal:
    s = np.asarray(scale, dtype=float).ravel()
    if np.any(s <= 0.0):
        raise ParameterDomainError("scale factors must be strictly positive")
    return SymTridiagonal(1.0 / s ** 2, np.zeros(max(s.size - 1, 0)))


# --- Kronecker utilities ---

def kron_logdet(logdet_A: float, dim_A: int, logdet_B: float, dim_B: int) -> float:
    """log|A kron B| = dim_B log|A| + dim_A log|B|."""
    return dim_B * logdet_A + dim_A * logdet_B


def kron_matvec(A: np.ndarray, B: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(A kron B) v for time-major v, via (A V B^T) with V = v reshaped (cols_A, cols_B)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    v = np.asarray(v, dtype=float)
    if v.size != A.shape[1] * B.shape[1]:
        raise ValueError(
            f"vector length {v.size} does not match {A.shape[1]} x {B.shape[1]} Kronecker operand")
    V = v.reshape(A.shape[1], B.shape[1])
    return (A @ V @ B.T).ravel()


# --- Thomas algorithm ---

def _thomas_sweep(d, c, rhs):
    n = d.shape[0]
    piv = np.empty(n)
    y = np.empty(n)
    piv[0] = d[0]
    if not piv[0] > 0.0:
        return -1, y
    y[0] = rhs[0]
    for k in range(1, n):
        m = c[k - 1] / piv[k - 1]
        piv[k] = d[k] - m * c[k - 1]
        if not piv[k] > 0.0:
            return k, y
        y[k] = rhs[k] - m * y[k - 1]
    x = y
    x[n - 1] = y[n - 1] / piv[n - 1]
    for k in range(n - 2, -1, -1):
        x[k] = (y[k] - c[k] * x[k + 1]) / piv[k]
    return n, x


if njit is not None:
    _thomas_sweep = njit(cache=True)(_thomas_sweep)


def thomas_solve(T: SymTridiagonal, rhs: np.ndarray) -> np.ndarray:
    """Solve T x = rhs in O(m) for symmetric positive definite tridiagonal T."""
    rhs = np.asarray(rhs, dtype=float).ravel()
    if rhs.size != T.size:
        raise ValueError(f"rhs length {rhs.size} does not match system size {T.size}")
    status, x = _thomas_sweep(T.d, T.c, rhs.copy())
    if status < T.size:
        raise NotPositiveDefiniteError(
            f"non-positive pivot at row {max(status, 0)} in tridiagonal solve", block_index=max(status, 0))
    return x


# --- Block tridiagonal Cholesky ---

def block_tridiag_cholesky(M: BlockTridiagonal) -> BlockCholeskyFactor:
    """L_1 L_1^T = D_1; E_k = C_k L_k^-T; L_{k+1} L_{k+1}^T = D_{k+1} - E_k E_k^T."""
    m, n = M.n_blocks, M.block_size
    L = np.empty((m, n, n))
    E = np.empty((max(m - 1, 0), n, n))
    pivot = M.D[0]
    for k in range(m):
        try:
            L[k] = scipy.linalg.cholesky(pivot, lower=True)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(f"block {k} is not positive definite", block_index=k)
        if k == m - 1:
            break
        E[k] = scipy.linalg.solve_triangular(L[k], M.C[k].T, lower=True).T
        pivot = M.D[k + 1] - E[k] @ E[k].T
    return BlockCholeskyFactor(L, E)


def block_tridiag_solve(F: BlockCholeskyFactor, rhs: np.ndarray) -> np.ndarray:
    """Forward then backward block substitution; rhs may be (N,) or (N, r)."""
    m, n = F.n_blocks, F.block_size
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != m * n:
        raise ValueError(f"rhs length {rhs.shape[0]} does not match {m} blocks of size {n}")
    tail = rhs.shape[1:]
    b = rhs.reshape((m, n) + tail)

    y = np.empty_like(b)
    y[0] = scipy.linalg.solve_triangular(F.L[0], b[0], lower=True)
    for k in range(1, m):
        y[k] = scipy.linalg.solve_triangular(F.L[k], b[k] - F.E[k - 1] @ y[k - 1], lower=True)

    x = np.empty_like(b)
    x[m - 1] = scipy.linalg.solve_triangular(F.L[m - 1], y[m - 1], lower=True, trans="T")
    for k in range(m - 2, -1, -1):
        x[k] = scipy.linalg.solve_triangular(F.L[k], y[k] - F.E[k].T @ x[k + 1], lower=True, trans="T")
    return x.reshape(rhs.shape)


def logdet_from_block_cholesky(F: BlockCholeskyFactor) -> float:
    diag = np.diagonal(F.L, axis1=1, axis2=2)
    return float(2.0 * np.sum(np.log(diag)))


def scale_blocks(T: SymTridiagonal, B: np.ndarray) -> BlockTridiagonal:
    """Block-tridiagonal representation of T kron B."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    D = T.d[:, None, None] * B[None, :, :]
    C = T.c[:, None, None] * B[None, :, :]
    return BlockTridiagonal(D, C)
