"""
Factor score predictors
Best linear, Takeuchi (Anderson-Rubin), Krijnen, Bartlett and Harman weights for
CFM and SPFA solutions, with determinacy and structural-similarity diagnostics
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from config import config
from errors import InputError, RankDeficiencyError, RotationModeError, SingularityError
from extraction import ExtractionMethod, FactorSolution
from matrix_kernel import (
    ArrayLike,
    MomentMode,
    SymMatrix,
    as_symmetric,
    cov_to_corr,
    sym_eigen,
    sym_inverse,
    sym_sqrt,
)
from rotation import RotationMode, RotationSolution, identity_rotation

logger = logging.getLogger(__name__)

# Lower bound on Psi_os (so Psi_os^2 >= 1e-8)
PSI_FLOOR = 1e-4


class PredictorFamily(str, Enum):
    """Score predictor closed forms"""

    BEST_LINEAR = "best_linear"
    TAKEUCHI = "takeuchi"
    KRIJNEN = "krijnen"
    BARTLETT = "bartlett"
    HARMAN = "harman"

    @classmethod
    def parse(cls, name: Union[str, "PredictorFamily"]) -> "PredictorFamily":
        """Accept family names and the anderson_rubin alias"""
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        if key == "anderson_rubin":
            return cls.TAKEUCHI
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join([f.value for f in cls] + ["anderson_rubin"])
            raise InputError(f"unknown predictor family '{name}' (choose from {choices})")


class ModelKind(str, Enum):
    """Which model the weights are derived from"""

    CFM = "cfm"
    SPFA = "spfa"


# ==================== DATA MODELS ====================


@dataclass
class ScorePredictor:
    """Weights B (p x q); scores are B'x"""

    family: PredictorFamily
    model: ModelKind
    weights: np.ndarray
    scale: np.ndarray
    moment_mode: MomentMode = MomentMode.CORRELATION
    mode: RotationMode = RotationMode.ORTHOGONAL

    @property
    def n_vars(self) -> int:
        return self.weights.shape[0]

    @property
    def n_factors(self) -> int:
        return self.weights.shape[1]

    def covariance(self, s: ArrayLike) -> np.ndarray:
        """Predictor covariance B'SB"""
        S = as_symmetric(s)
        cov = self.weights.T @ S @ self.weights
        return (cov + cov.T) / 2.0

    def to_frame(self, rows=None, cols=None) -> pd.DataFrame:
        return pd.DataFrame(self.weights, index=rows, columns=cols)


@dataclass
class ValidityReport:
    """Determinacy, correlation preservation, conditional unbiasedness and structural similarity"""

    determinacy: np.ndarray
    cross_correlations: np.ndarray
    predictor_intercorrelations: np.ndarray
    phi: np.ndarray
    structural_residual: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "determinacy": [float(x) for x in self.determinacy],
            "cross_correlations": self.cross_correlations.tolist(),
            "predictor_intercorrelations": self.predictor_intercorrelations.tolist(),
            "phi": self.phi.tolist(),
            "structural_residual": float(self.structural_residual),
        }


# ==================== UNIQUE VARIANCES ====================


def _offdiagonal_design(lam: np.ndarray):
    """Least-squares design for the off-diagonal entries of L A L' over symmetric A"""
    p, q = lam.shape
    rows, cols = np.triu_indices(p, k=1)
    pairs = [(k, l) for k in range(q) for l in range(k, q)]
    design = np.empty((rows.size, len(pairs)))
    for c, (k, l) in enumerate(pairs):
        column = lam[rows, k] * lam[cols, l]
        if k != l:
            column = column + lam[rows, l] * lam[cols, k]
        design[:, c] = column
    return design, pairs, rows, cols


def spfa_unique_variances(solution: FactorSolution, s: ArrayLike) -> np.ndarray:
    """
    Psi_os^2 = diag(S - L_os L_os') for SPFA solutions

    L_os is only determined up to L_os -> L_os Q. The scaling used here is the
    L_os = L_s C whose product L_os L_os' best fits the off-diagonal entries of
    S, so Psi_os^2 recovers the exact unique variances whenever S has the form
    L_os L_os' + Psi^2. Entries are floored at PSI_FLOOR^2.
    """
    S = as_symmetric(s)
    lam = solution.loadings.values
    q = lam.shape[1]
    design, pairs, rows, cols = _offdiagonal_design(lam)
    coef, *_ = np.linalg.lstsq(design, S[rows, cols], rcond=None)

    A = np.zeros((q, q))
    for value, (k, l) in zip(coef, pairs):
        A[k, l] = A[l, k] = value
    # L_os L_os' must be positive semidefinite
    eig = sym_eigen(A)
    if eig.values[-1] < 0.0:
        A = (eig.vectors * np.clip(eig.values, 0.0, None)) @ eig.vectors.T

    psi2 = np.diag(S) - np.einsum("ik,kl,il->i", lam, A, lam)
    return np.maximum(psi2, PSI_FLOOR**2)


# ==================== WEIGHTS ====================


def _inverse_named(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return sym_inverse(a)
    except SingularityError as e:
        raise RankDeficiencyError(f"{what} is singular: {e}", eigenvalue=e.eigenvalue) from e


def _bartlett_uniqueness(solution: FactorSolution, S: np.ndarray, labels) -> np.ndarray:
    if solution.method == ExtractionMethod.SPFA:
        return spfa_unique_variances(solution, S)
    psi2 = np.asarray(solution.uniqueness, dtype=float)
    eps = 1e-12 * max(1.0, float(np.max(np.diag(S))))
    zero = np.flatnonzero(psi2 <= eps)
    if zero.size:
        name = labels[zero[0]]
        raise SingularityError(
            f"Bartlett weights need positive uniquenesses; variable '{name}' has "
            f"uniqueness {psi2[zero[0]]:.3g}",
            eigenvalue=float(psi2[zero[0]]),
            variable=name,
        )
    return psi2


def predictor_weights(
    solution: FactorSolution,
    rotation: Optional[RotationSolution],
    family: Union[PredictorFamily, str],
    s: ArrayLike,
    moment_mode: Optional[Union[MomentMode, str]] = None,
) -> ScorePredictor:
    """
    Score predictor weights for a fitted and rotated model

    L is the rotated pattern, Phi its factor correlations and S the sample
    moment matrix; for SPFA solutions L is L_s(T')^-1 and Phi = T'T.
        best_linear  S^-1 L Phi
        takeuchi     S^-1 L (L'S^-1 L)^-1/2   (orthogonal rotations only)
        krijnen      S^-1 L (L'S^-1 L)^-1
        bartlett     Psi^-2 L (L'Psi^-2 L)^-1
        harman       L (L'L)^-1
    """
    family = PredictorFamily.parse(family)
    rotation = rotation or identity_rotation(solution.loadings)
    S = as_symmetric(s)
    lam = rotation.pattern.values
    phi = np.asarray(rotation.phi, dtype=float)
    p, q = lam.shape
    if S.shape[0] != p:
        raise InputError(f"pattern has {p} rows but S has order {S.shape[0]}")
    if moment_mode is None:
        moment_mode = s.mode if isinstance(s, SymMatrix) else config.MOMENT
    moment_mode = MomentMode(moment_mode)
    model = ModelKind.SPFA if solution.method == ExtractionMethod.SPFA else ModelKind.CFM

    if family == PredictorFamily.TAKEUCHI and rotation.mode != RotationMode.ORTHOGONAL:
        raise RotationModeError(
            "takeuchi/anderson_rubin weights require an orthogonal rotation: "
            "an orthogonal factor score predictor only makes sense for orthogonal factors"
        )

    if family == PredictorFamily.HARMAN:
        B = lam @ _inverse_named(lam.T @ lam, "L'L")
    elif family == PredictorFamily.BARTLETT:
        psi2 = _bartlett_uniqueness(solution, S, rotation.pattern.rows)
        scaled = lam / psi2[:, None]
        B = scaled @ _inverse_named(lam.T @ scaled, "L'Psi^-2 L")
    else:
        S_inv = sym_inverse(S)
        left = S_inv @ lam
        if family == PredictorFamily.BEST_LINEAR:
            B = left @ phi
        else:
            gauge = lam.T @ left
            gauge = (gauge + gauge.T) / 2.0
            if family == PredictorFamily.TAKEUCHI:
                try:
                    B = left @ sym_sqrt(gauge, "minus_half")
                except SingularityError as e:
                    raise RankDeficiencyError(
                        f"L'S^-1 L is singular: {e}", eigenvalue=e.eigenvalue
                    ) from e
            else:
                B = left @ _inverse_named(gauge, "L'S^-1 L")

    if not np.all(np.isfinite(B)):
        raise SingularityError(f"{family.value} weights are not finite")
    variances = np.diag(B.T @ S @ B)
    if np.any(variances <= 0.0):
        raise RankDeficiencyError(f"{family.value} predictor has a zero-variance component")

    logger.debug(f"{model.value} {family.value} weights: predictor SD {np.sqrt(variances)}")
    return ScorePredictor(
        family=family,
        model=model,
        weights=B,
        scale=np.sqrt(variances),
        moment_mode=moment_mode,
        mode=rotation.mode,
    )


# ==================== DIAGNOSTICS ====================


def reproduced_from_predictor(predictor: ScorePredictor, s: ArrayLike) -> np.ndarray:
    """Sigma_r = S B (B'SB)^-1 B' S"""
    S = as_symmetric(s)
    B = predictor.weights
    if B.shape[0] != S.shape[0]:
        raise InputError(f"weights have {B.shape[0]} rows but S has order {S.shape[0]}")
    SB = S @ B
    middle = _inverse_named(predictor.covariance(S), "B'SB")
    out = SB @ middle @ SB.T
    return (out + out.T) / 2.0


def validity_report(
    predictor: ScorePredictor,
    solution: FactorSolution,
    rotation: Optional[RotationSolution],
    s: ArrayLike,
) -> ValidityReport:
    """
    Validity criteria of a score predictor

    Factors have unit variance, so Cor(f_hat, f) = D^-1/2 B'L Phi with
    D = diag(B'SB). The structural residual is the Frobenius norm of the
    off-diagonal difference between Sigma_r and L Phi L'.
    """
    rotation = rotation or identity_rotation(solution.loadings)
    S = as_symmetric(s)
    lam = rotation.pattern.values
    phi = np.asarray(rotation.phi, dtype=float)
    B = predictor.weights
    if B.shape != lam.shape:
        raise InputError(f"weights have shape {B.shape}, pattern has shape {lam.shape}")

    cov = predictor.covariance(S)
    sd = np.sqrt(np.diag(cov))
    cross = (B.T @ lam @ phi) / sd[:, None]
    if np.max(np.abs(cross)) > 1.0 + 1e-8:
        logger.debug(f"cross-correlations exceed 1 by {np.max(np.abs(cross)) - 1.0:.2e}; clipped")
    cross = np.clip(cross, -1.0, 1.0)
    intercorrelations = np.clip(cov_to_corr(cov), -1.0, 1.0)

    diff = reproduced_from_predictor(predictor, S) - rotation.reproduced()
    np.fill_diagonal(diff, 0.0)

    return ValidityReport(
        determinacy=np.diag(cross).copy(),
        cross_correlations=cross,
        predictor_intercorrelations=intercorrelations,
        phi=phi,
        structural_residual=float(np.linalg.norm(diff)),
    )


def score_rows(
    predictor: ScorePredictor,
    data: Union[np.ndarray, pd.DataFrame],
    centering: str = "auto",
) -> np.ndarray:
    """
    Apply B' to observed rows

    centering: "auto" follows the moment mode the model was fitted on
    (standardize for correlation, center for covariance), or one of
    "standardize", "center", "none".
    """
    if isinstance(data, pd.DataFrame):
        data = data.to_numpy(dtype=float)
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != predictor.n_vars:
        raise InputError(
            f"data has shape {x.shape}, expected n x {predictor.n_vars} to match the weights"
        )

    if centering == "auto":
        centering = (
            "standardize" if predictor.moment_mode == MomentMode.CORRELATION else "center"
        )
    if centering == "standardize":
        if x.shape[0] < 2:
            raise InputError("standardizing needs at least 2 rows")
        sd = x.std(axis=0, ddof=1)
        if np.any(sd == 0.0):
            raise InputError(f"cannot standardize constant column {int(np.argmax(sd == 0.0)) + 1}")
        x = (x - x.mean(axis=0)) / sd
    elif centering == "center":
        x = x - x.mean(axis=0)
    elif centering != "none":
        raise InputError(f"unknown centering '{centering}'")

    return x @ predictor.weights
