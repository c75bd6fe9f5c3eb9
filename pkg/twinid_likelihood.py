#!/usr/bin/env python3
"""
Gaussian log-likelihood for correlated model-prediction error.

Three evaluation paths return the same value:
- dense oracle (build the N x N covariance, Cholesky),
- multiplicative fast path (Woodbury + block-tridiagonal Cholesky, EXP/IID time),
- additive fast path (Kronecker eigendecomposition, any kernel).
"""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg

from twinid_kernels import KernelKind, SpaceTimeGrid, is_independent, separable_correlation
from twinid_linalg import (block_tridiag_cholesky, block_tridiag_solve, exp_kernel_logdet,
                           exp_kernel_precision, iid_precision, kron_logdet, kron_matvec,
                           logdet_from_block_cholesky, scale_blocks)
from twinid_shared import (JITTER, N_DENSE_MAX, NotPositiveDefiniteError, ParameterDomainError,
                           StructuredPathUnavailableError, UnsupportedConfigurationError, logger)

LOG_2PI = math.log(2.0 * math.pi)


class ErrorStructure(str, Enum):
    MULTIPLICATIVE = "M"
    ADDITIVE = "A"


class LikelihoodPath(str, Enum):
    DENSE = "dense"
    MULTIPLICATIVE_FAST = "multiplicative-fast"
    ADDITIVE_EIGEN = "additive-eigen"


# Shorthand -> (error structure, temporal kernel, spatial kernel, active theta_c)
MODEL_CATALOG: Dict[str, Tuple[ErrorStructure, KernelKind, KernelKind, Tuple[str, ...]]] = {
    "IID-M": (ErrorStructure.MULTIPLICATIVE, KernelKind.IID, KernelKind.IID, ("C_v", "sigma_meas")),
    "RBF-M": (ErrorStructure.MULTIPLICATIVE, KernelKind.RBF, KernelKind.EXP,
              ("C_v", "sigma_meas", "l_corr_t", "l_corr_x")),
    "EXP-M": (ErrorStructure.MULTIPLICATIVE, KernelKind.EXP, KernelKind.EXP,
              ("C_v", "sigma_meas", "l_corr_t", "l_corr_x")),
    "IID-A": (ErrorStructure.ADDITIVE, KernelKind.IID, KernelKind.IID, ("sigma_model",)),
    "RBF-A": (ErrorStructure.ADDITIVE, KernelKind.RBF, KernelKind.EXP,
              ("sigma_model", "sigma_meas", "l_corr_t", "l_corr_x")),
    "EXP-A": (ErrorStructure.ADDITIVE, KernelKind.EXP, KernelKind.EXP,
              ("sigma_model", "sigma_meas", "l_corr_t", "l_corr_x")),
}

THETA_C_NAMES = ("C_v", "sigma_model", "sigma_meas", "l_corr_t", "l_corr_x")


@dataclass(frozen=True)
class ThetaC:
    C_v: Optional[float] = None          # [-], multiplicative only
    sigma_model: Optional[float] = None  # [MPa], additive only
    sigma_meas: Optional[float] = None   # [MPa]
    l_corr_t: Optional[float] = None     # [m]
    l_corr_x: Optional[float] = None     # [m]

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in THETA_C_NAMES if getattr(self, k) is not None}


@dataclass(frozen=True)
class ProbModelSpec:
    error_structure: ErrorStructure
    kt: KernelKind
    kx: KernelKind
    theta_c: ThetaC = field(default_factory=ThetaC)

    def __post_init__(self):
        object.__setattr__(self, "error_structure", ErrorStructure(self.error_structure))
        object.__setattr__(self, "kt", KernelKind.parse(self.kt))
        object.__setattr__(self, "kx", KernelKind.parse(self.kx))
        th = self.theta_c
        for name in ("C_v", "sigma_model", "sigma_meas", "l_corr_t", "l_corr_x"):
            value = getattr(th, name)
            if value is not None and (not np.isfinite(value) or value < 0.0):
                raise ParameterDomainError(f"{name} must be finite and non-negative, got {value}")
        if self.error_structure is ErrorStructure.MULTIPLICATIVE and th.sigma_model is not None:
            raise ParameterDomainError("sigma_model is not a parameter of a multiplicative model")
        if self.error_structure is ErrorStructure.ADDITIVE and th.C_v is not None:
            raise ParameterDomainError("C_v is not a parameter of an additive model")

    @property
    def shorthand(self) -> str:
        return f"{self.kt.value}-{self.error_structure.value}"

    @property
    def sigma_meas(self) -> float:
        return self.theta_c.sigma_meas or 0.0

    @property
    def C_v(self) -> float:
        return self.theta_c.C_v or 0.0

    @property
    def sigma_model(self) -> float:
        return self.theta_c.sigma_model or 0.0

    def with_theta(self, **values) -> "ProbModelSpec":
        return replace(self, theta_c=replace(self.theta_c, **values))

    @classmethod
    def from_shorthand(cls, shorthand: str, theta: Dict[str, float] = None) -> "ProbModelSpec":
        """Build a catalog model; only the shorthand's active theta_c are kept."""
        key = shorthand.upper()
        if key not in MODEL_CATALOG:
            raise ParameterDomainError(f"Unknown model shorthand '{shorthand}' (known: {', '.join(MODEL_CATALOG)})")
        error, kt, kx, active = MODEL_CATALOG[key]
        theta = theta or {}
        values = {name: float(theta[name]) for name in active if name in theta}
        return cls(error, kt, kx, ThetaC(**values))


def active_parameters(shorthand: str) -> Tuple[str, ...]:
    return MODEL_CATALOG[shorthand.upper()][3]


# --- Dense oracle ---

def _point_scale(spec: ProbModelSpec, y_model: np.ndarray) -> np.ndarray:
    """Standard deviation of the model error at every point (before correlation)."""
    if spec.error_structure is ErrorStructure.MULTIPLICATIVE:
        return spec.C_v * y_model
    return np.full(y_model.shape, spec.sigma_model)


def build_covariance_dense(spec: ProbModelSpec, grid: SpaceTimeGrid, y_model: np.ndarray,
                           n_dense_max: int = N_DENSE_MAX) -> np.ndarray:
    y_model = np.asarray(y_model, dtype=float).ravel()
    if y_model.size != grid.size:
        raise ValueError(f"y_model length {y_model.size} does not match grid size {grid.size}")
    if grid.size > n_dense_max:
        raise UnsupportedConfigurationError(
            f"dense covariance refused: N={grid.size} exceeds N_dense_max={n_dense_max}")
    th = spec.theta_c
    C_t, C_x = separable_correlation(spec.kt, spec.kx, grid, th.l_corr_t, th.l_corr_x)
    sigma = _point_scale(spec, y_model)
    Sigma = np.outer(sigma, sigma) * np.kron(C_t, C_x)
    Sigma[np.diag_indices_from(Sigma)] += spec.sigma_meas ** 2
    return Sigma


def loglik_dense(y_obs: np.ndarray, y_model: np.ndarray, Sigma: np.ndarray) -> float:
    r = np.asarray(y_obs, dtype=float).ravel() - np.asarray(y_model, dtype=float).ravel()
    try:
        cf = scipy.linalg.cho_factor(Sigma, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance matrix is not positive definite")
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = float(r @ scipy.linalg.cho_solve(cf, r))
    return -0.5 * (logdet + quad + r.size * LOG_2PI)


# --- Fast paths ---

def _spatial_precision(spec: ProbModelSpec, grid: SpaceTimeGrid) -> Tuple[np.ndarray, float]:
    """(C_x^-1, log|C_x|); identity for the independent kernel."""
    if is_independent(spec.kx, spec.theta_c.l_corr_x):
        return np.eye(grid.n_x), 0.0
    _, C_x = separable_correlation(KernelKind.IID, spec.kx, grid, None, spec.theta_c.l_corr_x)
    try:
        cf = scipy.linalg.cho_factor(C_x, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("spatial correlation matrix is not positive definite")
    C_x_inv = scipy.linalg.cho_solve(cf, np.eye(grid.n_x))
    C_x_inv = 0.5 * (C_x_inv + C_x_inv.T)
    return C_x_inv, 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


def loglik_multiplicative_fast(y_obs: np.ndarray, y_model: np.ndarray, spec: ProbModelSpec,
                               grid: SpaceTimeGrid) -> float:
    """Woodbury + determinant lemma with Sigma_eta = C_v^2 (C_t kron C_x), W = sigma_meas^2 I.

    r' S^-1 r = r'W^-1 r - v' (Sigma_eta^-1 + Y W^-1 Y)^-1 v,  v = Y W^-1 r
    log|S| = log|Sigma_eta^-1 + Y W^-1 Y| + log|Sigma_eta| + log|W|
    """
    if spec.error_structure is not ErrorStructure.MULTIPLICATIVE:
        raise StructuredPathUnavailableError("multiplicative fast path called with an additive model")
    if spec.kt is KernelKind.RBF and not is_independent(spec.kt, spec.theta_c.l_corr_t):
        raise StructuredPathUnavailableError(
            "RBF temporal kernel has no tridiagonal precision; use the dense path "
            "(or an additive model for the eigen path)")
    if spec.sigma_meas <= 0.0:
        raise StructuredPathUnavailableError("multiplicative fast path requires sigma_meas > 0")

    y_model = np.asarray(y_model, dtype=float).ravel()
    r = np.asarray(y_obs, dtype=float).ravel() - y_model
    N = grid.size
    if r.size != N:
        raise ValueError(f"data length {r.size} does not match grid size {N}")
    w = 1.0 / spec.sigma_meas ** 2
    logdet_W = N * math.log(spec.sigma_meas ** 2)
    quad_W = w * float(r @ r)
    if spec.C_v == 0.0:
        return -0.5 * (logdet_W + quad_W + N * LOG_2PI)

    scale = np.full(grid.n_t, spec.C_v)
    if is_independent(spec.kt, spec.theta_c.l_corr_t):
        T = iid_precision(scale)
        logdet_t = 2.0 * grid.n_t * math.log(spec.C_v)
    else:
        T = exp_kernel_precision(grid.t_coords, scale, spec.theta_c.l_corr_t)
        logdet_t = exp_kernel_logdet(grid.t_coords, scale, spec.theta_c.l_corr_t)
    C_x_inv, logdet_x = _spatial_precision(spec, grid)

    inner = scale_blocks(T, C_x_inv).add_diagonal(w * y_model ** 2)
    factor = block_tridiag_cholesky(inner)
    v = w * y_model * r
    X = block_tridiag_solve(factor, v)
    quad = quad_W - float(v @ X)
    logdet = (logdet_from_block_cholesky(factor)
              + kron_logdet(logdet_t, grid.n_t, logdet_x, grid.n_x)
              + logdet_W)
    return -0.5 * (logdet + quad + N * LOG_2PI)


def loglik_additive_fast(y_obs: np.ndarray, y_model: np.ndarray, spec: ProbModelSpec,
                         grid: SpaceTimeGrid) -> float:
    """Eigenvalues of C_t kron C_x are products lambda_t,i * lambda_x,j."""
    if spec.error_structure is not ErrorStructure.ADDITIVE:
        raise StructuredPathUnavailableError("additive fast path called with a multiplicative model")
    r = np.asarray(y_obs, dtype=float).ravel() - np.asarray(y_model, dtype=float).ravel()
    if r.size != grid.size:
        raise ValueError(f"data length {r.size} does not match grid size {grid.size}")
    th = spec.theta_c
    C_t, C_x = separable_correlation(spec.kt, spec.kx, grid, th.l_corr_t, th.l_corr_x)
    lam_t, Q_t = scipy.linalg.eigh(C_t)
    lam_x, Q_x = scipy.linalg.eigh(C_x)
    lam_t = np.clip(lam_t, 0.0, None)
    lam_x = np.clip(lam_x, 0.0, None)

    S = spec.sigma_model ** 2 * np.outer(lam_t, lam_x) + spec.sigma_meas ** 2
    if np.any(S <= 0.0):
        raise NotPositiveDefiniteError(
            "additive covariance is singular (sigma_meas = 0 with rank-deficient correlation)")
    rotated = kron_matvec(Q_t.T, Q_x.T, r)
    quad = float(np.sum(rotated ** 2 / S.ravel()))
    logdet = float(np.sum(np.log(S)))
    return -0.5 * (logdet + quad + r.size * LOG_2PI)


# --- Dispatch ---

def choose_path(spec: ProbModelSpec, grid: SpaceTimeGrid, n_dense_max: int = N_DENSE_MAX) -> LikelihoodPath:
    if spec.error_structure is ErrorStructure.MULTIPLICATIVE:
        temporal_ok = spec.kt is not KernelKind.RBF or is_independent(spec.kt, spec.theta_c.l_corr_t)
        if temporal_ok and spec.sigma_meas > 0.0:
            return LikelihoodPath.MULTIPLICATIVE_FAST
    else:
        full_rank = (is_independent(spec.kt, spec.theta_c.l_corr_t)
                     and is_independent(spec.kx, spec.theta_c.l_corr_x))
        if spec.sigma_meas > 0.0 or (full_rank and spec.sigma_model > 0.0):
            return LikelihoodPath.ADDITIVE_EIGEN
    if grid.size <= n_dense_max:
        return LikelihoodPath.DENSE
    raise UnsupportedConfigurationError(
        f"no likelihood path for {spec.shorthand} at N={grid.size} "
        f"(structured path unavailable and N exceeds N_dense_max={n_dense_max})")


def loglik(y_obs: np.ndarray, y_model: np.ndarray, spec: ProbModelSpec, grid: SpaceTimeGrid,
           n_dense_max: int = N_DENSE_MAX) -> float:
    path = choose_path(spec, grid, n_dense_max)
    logger.debug(f"loglik {spec.shorthand} N={grid.size} via {path.value}")
    if path is LikelihoodPath.MULTIPLICATIVE_FAST:
        return loglik_multiplicative_fast(y_obs, y_model, spec, grid)
    if path is LikelihoodPath.ADDITIVE_EIGEN:
        return loglik_additive_fast(y_obs, y_model, spec, grid)
    Sigma = build_covariance_dense(spec, grid, y_model, n_dense_max)
    return loglik_dense(y_obs, y_model, Sigma)


def loglik_lanes(y_obs: np.ndarray, y_model: np.ndarray, spec: ProbModelSpec, grid: SpaceTimeGrid,
                 n_lanes: int = 1, n_dense_max: int = N_DENSE_MAX) -> float:
    """Sum of independent per-lane log-likelihoods; vectors are lane-major."""
    obs = np.asarray(y_obs, dtype=float).reshape(n_lanes, grid.size)
    mod = np.asarray(y_model, dtype=float).reshape(n_lanes, grid.size)
    return float(sum(loglik(obs[i], mod[i], spec, grid, n_dense_max) for i in range(n_lanes)))


# --- Sampling from the data model ---

def sample_data_model(spec: ProbModelSpec, grid: SpaceTimeGrid, y_model: np.ndarray,
                      rng: np.random.Generator, n_draws: int = 1,
                      n_dense_max: int = N_DENSE_MAX) -> np.ndarray:
    """Draw y = y_model + sigma * (L z_1) + sigma_meas * z_2, shape (n_draws, N).

    L is the Cholesky factor of the (jittered) correlation C_t kron C_x: dense
    for N <= n_dense_max, otherwise the Kronecker product of factor Choleskys.
    """
    y_model = np.asarray(y_model, dtype=float).ravel()
    N = grid.size
    th = spec.theta_c
    C_t, C_x = separable_correlation(spec.kt, spec.kx, grid, th.l_corr_t, th.l_corr_x)
    sigma = _point_scale(spec, y_model)
    z = rng.standard_normal((n_draws, N))
    if N <= n_dense_max:
        C = np.kron(C_t, C_x)
        C[np.diag_indices_from(C)] += JITTER
        L = scipy.linalg.cholesky(C, lower=True)
        correlated = z @ L.T
    else:
        L_t = scipy.linalg.cholesky(C_t + JITTER * np.eye(grid.n_t), lower=True)
        L_x = scipy.linalg.cholesky(C_x + JITTER * np.eye(grid.n_x), lower=True)
        correlated = np.stack([kron_matvec(L_t, L_x, row) for row in z])
    noise = rng.standard_normal((n_draws, N))
    return y_model[None, :] + sigma[None, :] * correlated + spec.sigma_meas * noise
