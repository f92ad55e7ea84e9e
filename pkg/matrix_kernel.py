"""
Dense symmetric linear algebra shared by every module
Eigendecomposition, symmetric square roots, inversion and sample moments
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import DegenerateInputError, InputError, NumericalError, SingularityError

logger = logging.getLogger(__name__)

# Relative guard: eigenvalues at or below EPS_RELATIVE * largest eigenvalue are zero.
EPS_RELATIVE = 1e-10
MAX_CONDITION = 1e12
MAX_ORDER = 10_000

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]], "SymMatrix"]


class SqrtKind(str, Enum):
    """Which symmetric square root to take"""

    PLUS_HALF = "plus_half"
    MINUS_HALF = "minus_half"


class MomentMode(str, Enum):
    """Sample moment matrix flavour"""

    COVARIANCE = "covariance"
    CORRELATION = "correlation"


# ==================== DATA MODELS ====================


@dataclass(frozen=True)
class SymMatrix:
    """Symmetric matrix with variable labels (S or Sigma)"""

    values: np.ndarray
    labels: tuple[str, ...] = ()
    mode: MomentMode = MomentMode.COVARIANCE

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise InputError(f"symmetric matrix must be square, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InputError("symmetric matrix has non-finite entries")
        scale = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
        if np.max(np.abs(values - values.T), initial=0.0) > 1e-8 * scale:
            raise InputError("matrix is not symmetric")
        # exact symmetry in storage
        values = (values + values.T) / 2.0
        if self.mode == MomentMode.CORRELATION:
            if np.max(np.abs(np.diag(values) - 1.0), initial=0.0) > 1e-12:
                raise InputError("correlation matrix must have a unit diagonal")
            np.fill_diagonal(values, 1.0)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

        labels = tuple(self.labels) or tuple(f"X{i + 1}" for i in range(values.shape[0]))
        if len(labels) != values.shape[0]:
            raise InputError(
                f"{len(labels)} labels given for a matrix of order {values.shape[0]}"
            )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mode", MomentMode(self.mode))

    @property
    def order(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def to_frame(self) -> pd.DataFrame:
        """Labelled DataFrame view"""
        return pd.DataFrame(self.values, index=self.labels, columns=self.labels)


@dataclass(frozen=True)
class EigenPair:
    """Eigenvalues sorted descending with orthonormal eigenvectors in columns"""

    values: np.ndarray
    vectors: np.ndarray = field(repr=False)

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


# ==================== KERNEL OPERATIONS ====================


def as_symmetric(a: ArrayLike) -> np.ndarray:
    """Validate a square symmetric finite matrix and return an exactly symmetric copy"""
    if isinstance(a, SymMatrix):
        return np.array(a.values)
    arr = np.array(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InputError(f"expected a square matrix, got shape {arr.shape}")
    if arr.shape[0] > MAX_ORDER:
        raise InputError(f"matrix order {arr.shape[0]} exceeds {MAX_ORDER}")
    if not np.all(np.isfinite(arr)):
        raise InputError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(arr)))) if arr.size else 1.0
    if np.max(np.abs(arr - arr.T), initial=0.0) > 1e-8 * scale:
        raise InputError("matrix is not symmetric")
    return (arr + arr.T) / 2.0


def _flip_signs(vectors: np.ndarray) -> np.ndarray:
    """Orient each eigenvector so its largest-magnitude component is positive"""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eigen(a: ArrayLike) -> EigenPair:
    """
    Eigendecomposition of a symmetric matrix

    Eigenvalues are returned in descending order; eigenvector signs are fixed
    so that repeated calls give identical output.
    """
    arr = as_symmetric(a)
    try:
        values, vectors = np.linalg.eigh(arr)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"symmetric eigensolver did not converge: {e}") from e
    order = np.argsort(values)[::-1]
    values = values[order]
    vectors = _flip_signs(vectors[:, order])
    return EigenPair(values=values, vectors=vectors)


def _eps(values: np.ndarray) -> float:
    top = float(np.max(np.abs(values))) if values.size else 0.0
    return EPS_RELATIVE * top


def sym_sqrt(a: ArrayLike, kind: Union[SqrtKind, str] = SqrtKind.PLUS_HALF) -> np.ndarray:
    """
    Symmetric square root (plus_half) or inverse symmetric square root (minus_half)
    """
    kind = SqrtKind(kind)
    eig = sym_eigen(a)
    values = eig.values
    eps = _eps(values)

    if kind == SqrtKind.MINUS_HALF:
        smallest = float(values[-1]) if values.size else 0.0
        if values.size == 0 or smallest <= eps:
            raise SingularityError(
                f"inverse square root needs eigenvalues > {eps:.3g}, "
                f"smallest is {smallest:.6g}",
                eigenvalue=smallest,
            )
        diag = 1.0 / np.sqrt(values)
    else:
        if values.size and values[-1] < -max(eps, 1e-12):
            raise SingularityError(
                f"square root needs a positive semidefinite matrix, "
                f"smallest eigenvalue is {values[-1]:.6g}",
                eigenvalue=float(values[-1]),
            )
        diag = np.sqrt(np.clip(values, 0.0, None))

    root = (eig.vectors * diag) @ eig.vectors.T
    return (root + root.T) / 2.0


def sym_inverse(a: ArrayLike) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix"""
    eig = sym_eigen(a)
    values = eig.values
    eps = _eps(values)
    smallest = float(values[-1]) if values.size else 0.0
    if values.size == 0 or smallest <= eps:
        raise SingularityError(
            f"matrix is singular: smallest eigenvalue {smallest:.6g}", eigenvalue=smallest
        )
    condition = float(values[0] / smallest)
    if condition > MAX_CONDITION:
        raise SingularityError(
            f"matrix is near-singular: condition number {condition:.3g} "
            f"exceeds {MAX_CONDITION:.0e}",
            eigenvalue=smallest,
        )
    inverse = (eig.vectors / values) @ eig.vectors.T
    return (inverse + inverse.T) / 2.0


def condition_number(a: ArrayLike) -> float:
    """Spectral condition number of a symmetric matrix (inf when singular)"""
    values = np.abs(sym_eigen(a).values)
    if values.size == 0 or values.min() == 0.0:
        return float("inf")
    return float(values.max() / values.min())


def cov_to_corr(cov: np.ndarray) -> np.ndarray:
    """Rescale a covariance matrix to unit diagonal"""
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return corr


def sample_moment_matrix(
    data: Union[np.ndarray, pd.DataFrame],
    mode: Union[MomentMode, str] = MomentMode.CORRELATION,
    labels: Optional[Sequence[str]] = None,
) -> SymMatrix:
    """
    Unbiased sample covariance (divisor n - 1) or correlation matrix of the columns
    """
    mode = MomentMode(mode)
    if isinstance(data, pd.DataFrame):
        labels = labels or [str(c) for c in data.columns]
        data = data.to_numpy(dtype=float)
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise InputError(f"data must be an n x p matrix, got {x.ndim} dimensions")
    n, p = x.shape
    labels = tuple(labels) if labels else tuple(f"X{i + 1}" for i in range(p))
    if len(labels) != p:
        raise InputError(f"{len(labels)} labels given for {p} columns")
    if not np.all(np.isfinite(x)):
        raise InputError("data contains non-finite values")
    if n < 2:
        raise InputError(f"need at least 2 observations, got {n}")
    if n < p + 1:
        logger.warning(f"n={n} < p+1={p + 1}: sample moment matrix will be singular")

    cov = np.cov(x, rowvar=False, ddof=1).reshape(p, p)

    if mode == MomentMode.CORRELATION:
        variances = np.diag(cov)
        for j in range(p):
            if variances[j] <= 0.0:
                raise DegenerateInputError(
                    f"column '{labels[j]}' is constant; correlation is undefined",
                    column=labels[j],
                )
        return SymMatrix(cov_to_corr(cov), labels=labels, mode=mode)

    return SymMatrix(cov, labels=labels, mode=mode)
