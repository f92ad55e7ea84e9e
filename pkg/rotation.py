"""
Gradient projection rotation
Varimax, Parsimax, Infomax and Target criteria in orthogonal and oblique mode
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import orthogonal_procrustes
from scipy.special import xlogy
from scipy.stats import ortho_group

from config import config
from errors import DegenerateInputError, InputError, NumericalError
from extraction import LoadingMatrix
from matrix_kernel import ArrayLike

logger = logging.getLogger(__name__)

MIN_ABS_DET = 1e-6
LINE_SEARCH_STEPS = 11


class Criterion(str, Enum):
    """Rotation criterion"""

    VARIMAX = "varimax"
    PARSIMAX = "parsimax"
    INFOMAX = "infomax"
    TARGET = "target"


class RotationMode(str, Enum):
    """Admissible transformations"""

    ORTHOGONAL = "orthogonal"
    OBLIQUE = "oblique"


# ==================== DATA MODELS ====================


@dataclass
class RotationOptions:
    """Random starts and stopping rules"""

    starts: int = config.ROTATION_STARTS
    tolerance: float = config.ROTATION_TOLERANCE
    max_iter: int = config.ROTATION_MAX_ITER
    normalize: bool = False  # Kaiser row normalization
    seed: int = 0


@dataclass
class RotationSolution:
    """Rotated pattern L(T')^-1 with transformation T and factor correlations T'T"""

    pattern: LoadingMatrix
    transform: np.ndarray
    phi: np.ndarray
    criterion_value: float
    criterion: Criterion
    mode: RotationMode
    random_start_index: int
    converged: bool = True
    iterations: int = 0
    trace: List[float] = field(default_factory=list)

    def reproduced(self) -> np.ndarray:
        """Pattern * Phi * Pattern'"""
        pattern = self.pattern.values
        out = pattern @ self.phi @ pattern.T
        return (out + out.T) / 2.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "criterion": self.criterion.value,
            "mode": self.mode.value,
            "criterion_value": float(self.criterion_value),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "random_start_index": int(self.random_start_index),
            "transform": self.transform.tolist(),
            "phi": self.phi.tolist(),
        }


# ==================== CRITERIA ====================
# Every criterion is expressed as a quantity to minimize (varimax is negated).


def parsimax_kappa(p: int, q: int) -> float:
    """Crawford-Ferguson weight of the parsimax member"""
    if p + q - 2 <= 0:
        return 0.0
    return (q - 1) / (p + q - 2)


def _varimax(L: np.ndarray) -> Tuple[float, np.ndarray]:
    L2 = L**2
    QL = L2 - L2.mean(axis=0)
    return -float(np.sum(QL**2)) / 4.0, -L * QL


def _crawford_ferguson(L: np.ndarray, kappa: float) -> Tuple[float, np.ndarray]:
    p, q = L.shape
    L2 = L**2
    row_part = L2 @ (np.ones((q, q)) - np.eye(q))
    col_part = (np.ones((p, p)) - np.eye(p)) @ L2
    f = (1.0 - kappa) * np.sum(L2 * row_part) / 4.0 + kappa * np.sum(L2 * col_part) / 4.0
    grad = (1.0 - kappa) * L * row_part + kappa * L * col_part
    return float(f), grad


def _safe_log(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, np.finfo(float).tiny))


def _infomax(L: np.ndarray) -> Tuple[float, np.ndarray]:
    p, q = L.shape
    S = L**2
    total = float(np.sum(S))
    if total <= 0.0:
        raise DegenerateInputError("infomax is undefined for an all-zero loading matrix")
    s1 = S.sum(axis=1)
    s2 = S.sum(axis=0)
    E = S / total
    e1 = s1 / total
    e2 = s2 / total
    Q0 = -float(np.sum(xlogy(E, E)))
    Q1 = -float(np.sum(xlogy(e1, e1)))
    Q2 = -float(np.sum(xlogy(e2, e2)))
    f = np.log(q) + Q0 - Q1 - Q2

    H = -(_safe_log(E) + 1.0)
    alpha = np.sum(S * H) / total**2
    G0 = H / total - alpha
    h1 = -(_safe_log(e1) + 1.0)
    alpha1 = float(s1 @ h1) / total**2
    G1 = np.repeat(h1[:, None], q, axis=1) / total - alpha1
    h2 = -(_safe_log(e2) + 1.0)
    alpha2 = float(h2 @ s2) / total**2
    G2 = np.repeat(h2[None, :], p, axis=0) / total - alpha2
    grad = 2.0 * L * (G0 - G1 - G2)
    return float(f), grad


def _target(L: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = L - target
    return float(np.sum(diff**2)), 2.0 * diff


def criterion_value_and_gradient(
    lambda_rotated: ArrayLike,
    criterion: Union[Criterion, str],
    target: Optional[ArrayLike] = None,
) -> Tuple[float, np.ndarray]:
    """
    Criterion value (to be minimized) and its gradient with respect to the
    rotated loadings
    """
    L = np.asarray(lambda_rotated, dtype=float)
    if L.ndim != 2 or not np.all(np.isfinite(L)):
        raise InputError("rotated loadings must be a finite p x q matrix")
    criterion = Criterion(criterion)

    if criterion == Criterion.VARIMAX:
        return _varimax(L)
    if criterion == Criterion.PARSIMAX:
        return _crawford_ferguson(L, parsimax_kappa(*L.shape))
    if criterion == Criterion.INFOMAX:
        return _infomax(L)

    if target is None:
        raise InputError("target rotation requires a target matrix")
    target_arr = np.asarray(target, dtype=float)
    if target_arr.shape != L.shape:
        raise InputError(f"target has shape {target_arr.shape}, expected {L.shape}")
    return _target(L, target_arr)


# ==================== GRADIENT PROJECTION ====================


@dataclass
class _GPAResult:
    T: np.ndarray
    f: float
    converged: bool
    iterations: int
    trace: List[float]


def _gpa_orthogonal(
    A: np.ndarray, T: np.ndarray, vgq: Callable, opts: RotationOptions
) -> _GPAResult:
    L = A @ T
    f, Gq = vgq(L)
    G = A.T @ Gq
    alpha = 1.0
    trace = [f]
    converged = False
    iterations = 0

    for iterations in range(1, opts.max_iter + 1):
        M = T.T @ G
        Gp = G - T @ ((M + M.T) / 2.0)
        s = float(np.linalg.norm(Gp))
        if s < opts.tolerance:
            converged = True
            break

        alpha *= 2.0
        accepted = None
        for _ in range(LINE_SEARCH_STEPS):
            U, _, Vt = np.linalg.svd(T - alpha * Gp)
            Tt = U @ Vt
            ft, Gqt = vgq(A @ Tt)
            if f - ft > 0.5 * s**2 * alpha:
                accepted = (Tt, ft, Gqt)
                break
            alpha /= 2.0
        if accepted is None:
            if ft < f:
                accepted = (Tt, ft, Gqt)
            else:
                converged = s < np.sqrt(opts.tolerance)
                break

        T, f, Gq = accepted
        G = A.T @ Gq
        trace.append(f)

    return _GPAResult(T=T, f=f, converged=converged, iterations=iterations, trace=trace)


def _oblique_pattern(A: np.ndarray, T: np.ndarray) -> np.ndarray:
    return A @ np.linalg.inv(T).T


def _gpa_oblique(
    A: np.ndarray, T: np.ndarray, vgq: Callable, opts: RotationOptions
) -> _GPAResult:
    L = _oblique_pattern(A, T)
    f, Gq = vgq(L)
    G = -(L.T @ Gq @ np.linalg.inv(T)).T
    alpha = 1.0
    trace = [f]
    converged = False
    iterations = 0

    for iterations in range(1, opts.max_iter + 1):
        Gp = G - T * np.sum(T * G, axis=0)
        s = float(np.linalg.norm(Gp))
        if s < opts.tolerance:
            converged = True
            break

        alpha *= 2.0
        accepted = None
        candidate = None
        for _ in range(LINE_SEARCH_STEPS):
            X = T - alpha * Gp
            Tt = X / np.sqrt(np.sum(X**2, axis=0))
            if abs(np.linalg.det(Tt)) > MIN_ABS_DET:
                Lt = _oblique_pattern(A, Tt)
                ft, Gqt = vgq(Lt)
                candidate = (Tt, ft, Gqt, Lt)
                if f - ft > 0.5 * s**2 * alpha:
                    accepted = candidate
                    break
            alpha /= 2.0
        if accepted is None:
            if candidate is not None and candidate[1] < f:
                accepted = candidate
            else:
                converged = s < np.sqrt(opts.tolerance)
                break

        T, f, Gq, L = accepted
        G = -(L.T @ Gq @ np.linalg.inv(T)).T
        trace.append(f)

    return _GPAResult(T=T, f=f, converged=converged, iterations=iterations, trace=trace)


# ==================== ROTATE ====================


def _start_transforms(
    A: np.ndarray, criterion: Criterion, mode: RotationMode, target, opts: RotationOptions
) -> List[np.ndarray]:
    q = A.shape[1]
    starts = [np.eye(q)]
    if criterion == Criterion.TARGET:
        procrustes, _ = orthogonal_procrustes(A, target)
        if mode == RotationMode.ORTHOGONAL:
            # the least-squares orthogonal target fit has a closed form
            return [procrustes]
        starts.append(procrustes)
    rng = np.random.default_rng(opts.seed)
    for _ in range(opts.starts):
        starts.append(ortho_group.rvs(q, random_state=rng))
    return starts


def _standardize_signs(pattern: np.ndarray, T: np.ndarray):
    idx = np.argmax(np.abs(pattern), axis=0)
    signs = np.sign(pattern[idx, np.arange(pattern.shape[1])])
    signs[signs == 0] = 1.0
    return pattern * signs, T * signs


def rotate(
    lambda_: Union[LoadingMatrix, ArrayLike],
    criterion: Union[Criterion, str] = Criterion.VARIMAX,
    mode: Union[RotationMode, str] = RotationMode.ORTHOGONAL,
    target: Optional[ArrayLike] = None,
    opts: Optional[RotationOptions] = None,
) -> RotationSolution:
    """
    Rotate an orthogonal loading matrix by gradient projection

    The identity start plus opts.starts random orthonormal starts are tried and
    the lowest criterion wins (first found on ties). Columns are flipped so
    that each largest-absolute loading is positive; no permutation is applied.
    """
    opts = opts or RotationOptions()
    criterion = Criterion(criterion)
    mode = RotationMode(mode)
    loadings = lambda_ if isinstance(lambda_, LoadingMatrix) else LoadingMatrix(lambda_)
    A = np.array(loadings.values)
    p, q = A.shape

    target_arr = None
    if criterion == Criterion.TARGET:
        if target is None:
            raise InputError("target rotation requires a target matrix")
        target_arr = np.asarray(target, dtype=float)
        if target_arr.shape != (p, q):
            raise InputError(f"target has shape {target_arr.shape}, expected {(p, q)}")

    weights = np.ones(p)
    if opts.normalize:
        weights = np.sqrt(np.sum(A**2, axis=1))
        weights[weights == 0] = 1.0
        A = A / weights[:, None]
        if target_arr is not None:
            target_arr = target_arr / weights[:, None]

    def vgq(L):
        return criterion_value_and_gradient(L, criterion, target_arr)

    if q == 1:
        pattern, T = _standardize_signs(A * weights[:, None], np.eye(1))
        value = vgq(pattern / weights[:, None])[0]
        return RotationSolution(
            pattern=loadings.with_values(pattern),
            transform=T,
            phi=np.eye(1),
            criterion_value=value,
            criterion=criterion,
            mode=mode,
            random_start_index=0,
            trace=[value],
        )

    if np.linalg.matrix_rank(A) < q:
        raise InputError("loadings are not of full column rank; rotation is undefined")

    gpa = _gpa_orthogonal if mode == RotationMode.ORTHOGONAL else _gpa_oblique
    best: Optional[_GPAResult] = None
    best_index = -1
    failures = 0
    for index, T0 in enumerate(_start_transforms(A, criterion, mode, target_arr, opts)):
        try:
            result = gpa(A, T0, vgq, opts)
        except np.linalg.LinAlgError as e:
            failures += 1
            logger.debug(f"rotation start {index} failed: {e}")
            continue
        logger.debug(
            f"{criterion.value}/{mode.value} start {index}: f={result.f:.10g} "
            f"converged={result.converged} iterations={result.iterations}"
        )
        if best is None or result.f < best.f:
            best, best_index = result, index

    if best is None:
        raise NumericalError(f"all {failures} rotation starts failed (singular transformation)")
    if not best.converged:
        logger.warning(
            f"{criterion.value} rotation did not converge on any start "
            f"(best after {best.iterations} iterations)"
        )

    T = best.T
    if mode == RotationMode.ORTHOGONAL:
        pattern = A @ T
    else:
        pattern = _oblique_pattern(A, T)
    pattern, T = _standardize_signs(pattern, T)
    value = vgq(pattern)[0]
    pattern = pattern * weights[:, None]
    phi = np.eye(q) if mode == RotationMode.ORTHOGONAL else T.T @ T
    phi = (phi + phi.T) / 2.0
    if mode == RotationMode.OBLIQUE:
        np.fill_diagonal(phi, 1.0)

    return RotationSolution(
        pattern=loadings.with_values(pattern),
        transform=T,
        phi=phi,
        criterion_value=value,
        criterion=criterion,
        mode=mode,
        random_start_index=best_index,
        converged=best.converged,
        iterations=best.iterations,
        trace=best.trace,
    )


def identity_rotation(loadings: LoadingMatrix) -> RotationSolution:
    """Unrotated orthogonal solution wrapped as a RotationSolution"""
    q = loadings.shape[1]
    return RotationSolution(
        pattern=loadings,
        transform=np.eye(q),
        phi=np.eye(q),
        criterion_value=float("nan"),
        criterion=Criterion.VARIMAX,
        mode=RotationMode.ORTHOGONAL,
        random_start_index=0,
        iterations=0,
    )
