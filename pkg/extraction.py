"""
Orthogonal factor extraction
Minres (least-squares off-diagonal fit of S - LL') and Score Predictor Factor
Analysis (off-diagonal fit of S - L(L'S^-1 L)^-1 L')
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from config import config
from errors import InputError, RankDeficiencyError, SingularityError
from matrix_kernel import (
    ArrayLike,
    SymMatrix,
    as_symmetric,
    condition_number,
    sym_eigen,
    sym_inverse,
    sym_sqrt,
)

logger = logging.getLogger(__name__)

LOADING_SLACK = 1.2
# L-BFGS-B cycle length between gauge renormalizations
SPFA_CYCLE = 200


class ExtractionMethod(str, Enum):
    """Extraction objective"""

    MINRES = "minres"
    SPFA = "spfa"


# ==================== DATA MODELS ====================


@dataclass(frozen=True)
class LoadingMatrix:
    """p x q loading or pattern matrix with variable and factor labels"""

    values: np.ndarray
    rows: tuple[str, ...] = ()
    cols: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise InputError(f"loadings must be a p x q matrix, got {values.ndim} dimensions")
        if not np.all(np.isfinite(values)):
            raise InputError("loadings contain non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

        p, q = values.shape
        rows = tuple(self.rows) or tuple(f"X{i + 1}" for i in range(p))
        cols = tuple(self.cols) or tuple(f"F{j + 1}" for j in range(q))
        if len(rows) != p or len(cols) != q:
            raise InputError(
                f"label counts ({len(rows)}, {len(cols)}) do not match shape {values.shape}"
            )
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def with_values(self, values: np.ndarray) -> "LoadingMatrix":
        """Same labels, new entries"""
        return LoadingMatrix(values, rows=self.rows, cols=self.cols)

    def out_of_range(self, slack: float = LOADING_SLACK) -> List[tuple[str, str]]:
        """Cells whose absolute loading exceeds the correlation-metric band"""
        idx = np.argwhere(np.abs(self.values) > slack)
        return [(self.rows[i], self.cols[j]) for i, j in idx]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=list(self.rows), columns=list(self.cols))


@dataclass
class FitOptions:
    """Extraction tolerances and starting point"""

    tolerance: float = config.TOLERANCE
    gradient_tolerance: float = config.GRADIENT_TOLERANCE
    max_iter: int = config.MAX_ITER
    heywood_bound: float = config.HEYWOOD_BOUND
    # "minres", "pca" or an explicit p x q array (SPFA only)
    start: Union[str, np.ndarray] = "minres"


@dataclass
class FactorSolution:
    """Orthogonal extraction result"""

    method: ExtractionMethod
    loadings: LoadingMatrix
    uniqueness: np.ndarray
    objective: float
    iterations: int
    converged: bool
    trace: List[float] = field(default_factory=list)
    heywood: tuple[str, ...] = ()
    condition_number: float = float("nan")
    elapsed: float = 0.0

    @property
    def n_vars(self) -> int:
        return self.loadings.shape[0]

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    @property
    def communalities(self) -> np.ndarray:
        return np.sum(self.loadings.values**2, axis=1)

    def gauge(self, s: ArrayLike) -> np.ndarray:
        """L'S^-1 L (identity for converged SPFA solutions)"""
        lam = self.loadings.values
        return lam.T @ sym_inverse(s) @ lam

    def model_error(self, s: ArrayLike) -> np.ndarray:
        """Residual covariances not explained by factors or uniquenesses (Omega)"""
        resid = as_symmetric(s) - reproduce_moment(self)
        np.fill_diagonal(resid, 0.0)
        return resid

    def to_dict(self) -> Dict[str, Any]:
        """Metadata for JSON output"""
        return {
            "method": self.method.value,
            "variables": list(self.loadings.rows),
            "factors": list(self.loadings.cols),
            "uniqueness": [float(u) for u in self.uniqueness],
            "communalities": [float(h) for h in self.communalities],
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "heywood": list(self.heywood),
            "condition_number": float(self.condition_number),
        }


# ==================== HELPERS ====================


def _labels(s: ArrayLike, p: int) -> tuple[str, ...]:
    if isinstance(s, SymMatrix):
        return s.labels
    return tuple(f"X{i + 1}" for i in range(p))


def _check_factor_count(q: int, p: int) -> None:
    if not isinstance(q, (int, np.integer)) or q < 1:
        raise InputError(f"number of factors must be a positive integer, got {q!r}")
    if q >= p:
        raise InputError(f"number of factors q={q} must be smaller than p={p}")


def _canonical(lam: np.ndarray) -> np.ndarray:
    """Principal-axis orientation of an orthogonal solution, largest loading positive"""
    eig = sym_eigen(lam.T @ lam)
    lam = lam @ eig.vectors
    idx = np.argmax(np.abs(lam), axis=0)
    signs = np.sign(lam[idx, np.arange(lam.shape[1])])
    signs[signs == 0] = 1.0
    return lam * signs


def _offdiag_ss(resid: np.ndarray) -> float:
    off = resid - np.diag(np.diag(resid))
    return float(np.sum(off**2))


def minres_objective(s: ArrayLike, loadings: ArrayLike) -> float:
    """Sum of squared off-diagonal residuals of S - LL'"""
    S = as_symmetric(s)
    lam = np.asarray(loadings, dtype=float)
    return _offdiag_ss(S - lam @ lam.T)


def _loadings_from_psi(S: np.ndarray, psi: np.ndarray, q: int) -> np.ndarray:
    eig = sym_eigen(S - np.diag(psi))
    values = np.clip(eig.values[:q], 0.0, None)
    return eig.vectors[:, :q] * np.sqrt(values)


def _psi_residual(S: np.ndarray, psi: np.ndarray, q: int):
    """Full residual criterion over unique variances and its gradient"""
    lam = _loadings_from_psi(S, psi, q)
    resid = S - np.diag(psi) - lam @ lam.T
    return float(np.sum(resid**2)), -2.0 * np.diag(resid)


# ==================== MINRES ====================


def minres_fit(s: ArrayLike, q: int, opts: Optional[FitOptions] = None) -> FactorSolution:
    """
    Minres extraction

    Unique variances start from squared multiple correlations, are refined by
    principal-axis iteration and polished with L-BFGS-B on the least-squares
    residual. For fixed unique variances the optimal loadings are the top-q
    principal axes of S - Psi^2, so the polish minimizes the off-diagonal
    criterion over loadings. Communalities are clamped to heywood_bound * diag(S).
    """
    opts = opts or FitOptions()
    started = time.perf_counter()
    S = as_symmetric(s)
    p = S.shape[0]
    labels = _labels(s, p)
    _check_factor_count(q, p)

    S_inv = sym_inverse(S)
    diag_s = np.diag(S)
    lower = (1.0 - opts.heywood_bound) * diag_s
    upper = diag_s.copy()

    smc = diag_s - 1.0 / np.diag(S_inv)
    psi = np.clip(diag_s - smc, lower, upper)

    # principal-axis warm start
    for _ in range(25):
        lam = _loadings_from_psi(S, psi, q)
        psi_new = np.clip(diag_s - np.sum(lam**2, axis=1), lower, upper)
        if np.max(np.abs(psi_new - psi)) < 1e-6:
            psi = psi_new
            break
        psi = psi_new

    trace: List[float] = [_psi_residual(S, psi, q)[0]]

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    res = minimize(
        lambda x: _psi_residual(S, x, q),
        psi,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lower, upper)),
        callback=record,
        options={
            "maxiter": opts.max_iter,
            "ftol": 1e-15,
            "gtol": opts.gradient_tolerance * 1e-3,
        },
    )
    psi = np.clip(res.x, lower, upper)
    _, grad = _psi_residual(S, psi, q)

    # projected gradient: components pinned at a bound and pushing outward are stationary
    at_lower = (psi <= lower + 1e-12) & (grad > 0)
    at_upper = (psi >= upper - 1e-12) & (grad < 0)
    projected = np.where(at_lower | at_upper, 0.0, grad)
    converged = bool(np.max(np.abs(projected), initial=0.0) < opts.gradient_tolerance)
    if res.nit >= opts.max_iter:
        converged = False

    lam = _canonical(_loadings_from_psi(S, psi, q))
    uniqueness = np.clip(diag_s - np.sum(lam**2, axis=1), 0.0, diag_s)

    heywood = tuple(labels[i] for i in np.flatnonzero(psi <= lower + 1e-10))
    if heywood:
        logger.warning(f"Heywood case: communality clamped for {', '.join(heywood)}")

    loadings = LoadingMatrix(lam, rows=labels)
    if loadings.out_of_range():
        logger.warning(f"Minres loadings outside |L| <= {LOADING_SLACK}: {loadings.out_of_range()}")

    objective = minres_objective(S, lam)
    if not converged:
        logger.warning(f"Minres did not converge after {res.nit} iterations ({res.message})")
    elapsed = time.perf_counter() - started
    logger.debug(f"Minres q={q}: objective={objective:.3e} iterations={res.nit}")

    return FactorSolution(
        method=ExtractionMethod.MINRES,
        loadings=loadings,
        uniqueness=uniqueness,
        objective=objective,
        iterations=int(res.nit),
        converged=converged,
        trace=trace,
        heywood=heywood,
        condition_number=condition_number(S),
        elapsed=elapsed,
    )


# ==================== SPFA ====================


def _gauge_inverse(S_inv: np.ndarray, lam: np.ndarray) -> np.ndarray:
    gauge = lam.T @ S_inv @ lam
    try:
        return sym_inverse(gauge)
    except SingularityError as e:
        raise RankDeficiencyError(
            f"gauge matrix L'S^-1 L is singular: {e}", eigenvalue=e.eigenvalue
        ) from e


def _spfa_parts(S: np.ndarray, S_inv: np.ndarray, lam: np.ndarray):
    """Reproduced matrix M, off-diagonal residual R and K = L(L'S^-1 L)^-1"""
    K = lam @ _gauge_inverse(S_inv, lam)
    M = K @ lam.T
    M = (M + M.T) / 2.0
    R = S - M
    np.fill_diagonal(R, 0.0)
    return M, R, K


def _spfa_value_and_gradient(S: np.ndarray, S_inv: np.ndarray, lam: np.ndarray):
    M, R, K = _spfa_parts(S, S_inv, lam)
    value = float(np.sum(R**2))
    grad = -4.0 * (R @ K - S_inv @ (M @ (R @ K)))
    return value, grad


def spfa_objective(s: ArrayLike, loadings: ArrayLike) -> float:
    """Sum of squared off-diagonal residuals of S - L(L'S^-1 L)^-1 L'"""
    S = as_symmetric(s)
    lam = np.asarray(loadings, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    _, R, _ = _spfa_parts(S, sym_inverse(S), lam)
    return float(np.sum(R**2))


def spfa_gradient(s: ArrayLike, loadings: ArrayLike) -> np.ndarray:
    """Analytic gradient of spfa_objective with respect to the loadings"""
    S = as_symmetric(s)
    lam = np.asarray(loadings, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    return _spfa_value_and_gradient(S, sym_inverse(S), lam)[1]


def normalize_gauge(s: ArrayLike, loadings: ArrayLike) -> np.ndarray:
    """Rescale L to L(L'S^-1 L)^-1/2 so that the gauge equals the identity"""
    S = as_symmetric(s)
    lam = np.asarray(loadings, dtype=float)
    return _normalize(sym_inverse(S), lam)


def _normalize(S_inv: np.ndarray, lam: np.ndarray) -> np.ndarray:
    gauge = lam.T @ S_inv @ lam
    try:
        return lam @ sym_sqrt(gauge, "minus_half")
    except SingularityError as e:
        raise RankDeficiencyError(
            f"gauge matrix L'S^-1 L is singular: {e}", eigenvalue=e.eigenvalue
        ) from e


def _pca_start(S: np.ndarray, q: int) -> np.ndarray:
    eig = sym_eigen(S)
    return eig.vectors[:, :q] * np.sqrt(np.clip(eig.values[:q], 0.0, None))


def spfa_fit(s: ArrayLike, q: int, opts: Optional[FitOptions] = None) -> FactorSolution:
    """
    Score Predictor Factor Analysis extraction

    Minimizes the off-diagonal residual of S - L(L'S^-1 L)^-1 L' with L-BFGS-B.
    The objective is invariant under L -> LQ, so the iterate is renormalized to
    L(L'S^-1 L)^-1/2 between optimizer cycles; the returned loadings satisfy
    L'S^-1 L = I and are rotated to principal axes.
    """
    opts = opts or FitOptions()
    started = time.perf_counter()
    S = as_symmetric(s)
    p = S.shape[0]
    labels = _labels(s, p)
    _check_factor_count(q, p)

    S_inv = sym_inverse(S)
    cond = condition_number(S)
    if cond > 1e8:
        logger.warning(f"S is ill-conditioned (condition number {cond:.3g})")

    start = opts.start
    if isinstance(start, str):
        if start == "minres":
            lam0 = minres_fit(S, q, opts).loadings.values
        elif start == "pca":
            lam0 = _pca_start(S, q)
        else:
            raise InputError(f"unknown SPFA start '{start}' (use minres, pca or an array)")
    else:
        lam0 = np.asarray(start, dtype=float)
        if lam0.shape != (p, q):
            raise InputError(f"start loadings have shape {lam0.shape}, expected {(p, q)}")

    try:
        lam = _normalize(S_inv, lam0)
    except RankDeficiencyError:
        if not (isinstance(start, str) and start == "minres"):
            raise
        logger.warning("Minres start has a singular gauge; falling back to principal components")
        lam = _normalize(S_inv, _pca_start(S, q))

    f_prev = _spfa_value_and_gradient(S, S_inv, lam)[0]
    trace: List[float] = [f_prev]

    def fun(x):
        value, grad = _spfa_value_and_gradient(S, S_inv, x.reshape(p, q))
        return value, grad.ravel()

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    iterations = 0
    converged = False
    while iterations < opts.max_iter:
        res = minimize(
            fun,
            lam.ravel(),
            jac=True,
            method="L-BFGS-B",
            callback=record,
            options={
                "maxiter": min(SPFA_CYCLE, opts.max_iter - iterations),
                "ftol": 1e-16,
                "gtol": opts.gradient_tolerance * 1e-2,
            },
        )
        iterations += max(int(res.nit), 1)
        lam = _normalize(S_inv, res.x.reshape(p, q))
        value, grad = _spfa_value_and_gradient(S, S_inv, lam)
        logger.debug(f"SPFA cycle: objective={value:.6e} max|grad|={np.max(np.abs(grad)):.2e}")

        if abs(f_prev - value) < opts.tolerance and np.max(np.abs(grad)) < opts.gradient_tolerance:
            converged = True
            break
        if res.nit == 0:
            # optimizer cannot move; stationary to working precision or stuck
            converged = bool(np.max(np.abs(grad)) < opts.gradient_tolerance)
            break
        f_prev = value

    if not converged:
        logger.warning(f"SPFA did not converge within {opts.max_iter} iterations")

    lam = _canonical(lam)
    objective = spfa_objective(S, lam)
    uniqueness = np.clip(np.diag(S) - np.sum(lam**2, axis=1), 0.0, None)
    loadings = LoadingMatrix(lam, rows=labels)
    if loadings.out_of_range():
        logger.warning(f"SPFA loadings outside |L| <= {LOADING_SLACK}: {loadings.out_of_range()}")

    elapsed = time.perf_counter() - started
    logger.debug(f"SPFA q={q}: objective={objective:.3e} iterations={iterations}")

    return FactorSolution(
        method=ExtractionMethod.SPFA,
        loadings=loadings,
        uniqueness=uniqueness,
        objective=objective,
        iterations=iterations,
        converged=converged,
        trace=trace,
        condition_number=cond,
        elapsed=elapsed,
    )


def fit(
    s: ArrayLike,
    q: int,
    method: Union[ExtractionMethod, str],
    opts: Optional[FitOptions] = None,
) -> FactorSolution:
    """Dispatch to minres_fit or spfa_fit"""
    method = ExtractionMethod(method)
    if method == ExtractionMethod.MINRES:
        return minres_fit(s, q, opts)
    return spfa_fit(s, q, opts)


def reproduce_moment(solution: FactorSolution, phi: Optional[ArrayLike] = None) -> np.ndarray:
    """
    Moment matrix reproduced by the common factors

    SPFA: L_s L_s', which equals L_os(L_os'S^-1 L_os)^-1 L_os' and does not
    change under rotation. Minres: L Phi L' (Phi defaults to the identity).
    """
    lam = solution.loadings.values
    q = lam.shape[1]
    if phi is None:
        phi_arr = np.eye(q)
    else:
        phi_arr = np.asarray(phi, dtype=float)
        if phi_arr.shape != (q, q):
            raise InputError(f"phi has shape {phi_arr.shape}, expected {(q, q)}")

    if solution.method == ExtractionMethod.SPFA:
        reproduced = lam @ lam.T
    else:
        reproduced = lam @ phi_arr @ lam.T
    return (reproduced + reproduced.T) / 2.0


def solution_from_loadings(
    method: Union[ExtractionMethod, str],
    loadings: ArrayLike,
    s: ArrayLike,
    rows: Sequence[str] = (),
) -> FactorSolution:
    """Wrap externally supplied orthogonal loadings as a FactorSolution"""
    method = ExtractionMethod(method)
    S = as_symmetric(s)
    lam = np.asarray(loadings, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    if lam.shape[0] != S.shape[0]:
        raise InputError(f"loadings have {lam.shape[0]} rows but S has order {S.shape[0]}")
    rows = tuple(rows) or _labels(s, S.shape[0])
    if method == ExtractionMethod.SPFA:
        objective = spfa_objective(S, lam)
    else:
        objective = minres_objective(S, lam)
    uniqueness = np.clip(np.diag(S) - np.sum(lam**2, axis=1), 0.0, None)
    return FactorSolution(
        method=method,
        loadings=LoadingMatrix(lam, rows=rows),
        uniqueness=uniqueness,
        objective=objective,
        iterations=0,
        converged=True,
        trace=[objective],
    )
