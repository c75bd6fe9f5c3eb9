#!/usr/bin/env python3
"""
Correlation functions in space and time, and the separable space-time grid.

Distances are one-dimensional |a - b| along the longitudinal bridge axis, both
for sensor positions (x) and for load positions (t).
"""
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np

from twinid_shared import L_MIN, GridError, ParameterDomainError


class KernelKind(str, Enum):
    IID = "IID"
    RBF = "RBF"
    EXP = "EXP"

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ParameterDomainError(f"Unknown kernel '{value}' (expected IID, RBF or EXP)")


def _check_strictly_increasing(coords: np.ndarray, label: str) -> None:
    if coords.ndim != 1 or coords.size == 0:
        raise GridError(f"{label} must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(coords)):
        raise GridError(f"{label} contains non-finite values")
    if coords.size > 1 and np.any(np.diff(coords) <= 0.0):
        raise GridError(f"{label} must be strictly increasing (duplicates are not allowed)")


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Observation lattice: sensors (x) by load positions (t).

    Vectorization is time-major: entry k * n_x + j holds sensor j at time
    index k, which matches C = C_t kron C_x.
    """
    x_coords: np.ndarray
    t_coords: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_coords, dtype=float)
        t = np.asarray(self.t_coords, dtype=float)
        _check_strictly_increasing(x, "x_coords")
        _check_strictly_increasing(t, "t_coords")
        object.__setattr__(self, "x_coords", x)
        object.__setattr__(self, "t_coords", t)

    @property
    def n_x(self) -> int:
        return self.x_coords.size

    @property
    def n_t(self) -> int:
        return self.t_coords.size

    @property
    def size(self) -> int:
        return self.n_x * self.n_t

    def index(self, k: int, j: int) -> int:
        return k * self.n_x + j

    def as_matrix(self, vector: np.ndarray) -> np.ndarray:
        """Reshape a time-major vector into an (n_t, n_x) array."""
        return np.asarray(vector).reshape(self.n_t, self.n_x)

    def subgrid(self, sensor_idx: Sequence[int] = None, time_idx: Sequence[int] = None) -> "SpaceTimeGrid":
        xi = np.arange(self.n_x) if sensor_idx is None else np.sort(np.asarray(sensor_idx, dtype=int))
        ti = np.arange(self.n_t) if time_idx is None else np.sort(np.asarray(time_idx, dtype=int))
        return SpaceTimeGrid(self.x_coords[xi], self.t_coords[ti])

    def subvector(self, vector: np.ndarray, sensor_idx: Sequence[int] = None,
                  time_idx: Sequence[int] = None) -> np.ndarray:
        mat = self.as_matrix(vector)
        xi = np.arange(self.n_x) if sensor_idx is None else np.sort(np.asarray(sensor_idx, dtype=int))
        ti = np.arange(self.n_t) if time_idx is None else np.sort(np.asarray(time_idx, dtype=int))
        return mat[np.ix_(ti, xi)].ravel()


def is_independent(kind: KernelKind, l_corr: float) -> bool:
    """True when the kernel degenerates to the identity correlation."""
    return KernelKind.parse(kind) is KernelKind.IID or l_corr is None or l_corr <= L_MIN


def _check_lengthscale(kind: KernelKind, l_corr: float) -> None:
    if kind is KernelKind.IID:
        return
    if l_corr is None or not np.isfinite(l_corr) or l_corr <= 0.0:
        raise ParameterDomainError(f"{kind.value} kernel requires a positive lengthscale, got {l_corr}")


def _kernel_from_distance(kind: KernelKind, dist: np.ndarray, l_corr: float) -> np.ndarray:
    if kind is KernelKind.IID or l_corr <= L_MIN:
        return (dist == 0.0).astype(float)
    if kind is KernelKind.EXP:
        return np.exp(-dist / l_corr)
    return np.exp(-0.5 * (dist / l_corr) ** 2)


def eval_kernel(kind: KernelKind, a: float, b: float, l_corr: float = None) -> float:
    kind = KernelKind.parse(kind)
    _check_lengthscale(kind, l_corr)
    dist = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return float(_kernel_from_distance(kind, dist, l_corr if l_corr is not None else 0.0))


def correlation_matrix(kind: KernelKind, coords: Sequence[float], l_corr: float = None) -> np.ndarray:
    kind = KernelKind.parse(kind)
    coords = np.asarray(coords, dtype=float)
    _check_strictly_increasing(coords, "coords")
    _check_lengthscale(kind, l_corr)
    if is_independent(kind, l_corr):
        return np.eye(coords.size)
    dist = np.abs(coords[:, None] - coords[None, :])
    return _kernel_from_distance(kind, dist, l_corr)


def separable_correlation(kt: KernelKind, kx: KernelKind, grid: SpaceTimeGrid,
                          l_t: float = None, l_x: float = None) -> Tuple[np.ndarray, np.ndarray]:
    """Kronecker factors (C_t, C_x); the full correlation is C_t kron C_x.

    Lengthscales at or below L_MIN (including a prior draw of exactly 0)
    give the identity factor.
    """
    C_t = np.eye(grid.n_t) if is_independent(kt, l_t) else correlation_matrix(kt, grid.t_coords, l_t)
    C_x = np.eye(grid.n_x) if is_independent(kx, l_x) else correlation_matrix(kx, grid.x_coords, l_x)
    return C_t, C_x
