"""Canonical correlations, the whitened-error NMSE bound, and rival criteria.

The bound for a layer is evaluated on the residual-output moments (X, Y+X)
while the fitted linear map itself uses (X, Y); callers get that split from
``ranking.score_layer``. Everything here operates on plain covariance sets
or raw activation matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .spectral import FLOOR_REL_DEFAULT, RIDGE_REL, inv_sqrt_psd, ridged, singular_values
from .stats import CovarianceSet


@dataclass(frozen=True)
class CcaSpectrum:
    """Canonical correlations, descending, clamped into [0, 1]."""

    rho: np.ndarray
    h_in: int
    h_out: int

    @property
    def rank(self) -> int:
        return min(self.h_in, self.h_out)


def standardized_cross_correlation(
    cs: CovarianceSet,
    ridge_rel: float = RIDGE_REL,
    floor_rel: float = FLOOR_REL_DEFAULT,
) -> np.ndarray:
    """Whitened cross-covariance C_YY^(-1/2) C_YX C_XX^(-1/2), shape (h_out, h_in)."""
    w_y = inv_sqrt_psd(cs.c_yy, floor_rel)
    w_x = inv_sqrt_psd(ridged(cs.c_xx, ridge_rel), floor_rel)
    return w_y @ cs.c_yx @ w_x


def canonical_correlations(cw: np.ndarray) -> CcaSpectrum:
    cw = np.asarray(cw, dtype=np.float64)
    sigma = singular_values(cw)
    rho = np.clip(sigma, 0.0, 1.0)
    return CcaSpectrum(rho=rho, h_in=cw.shape[1], h_out=cw.shape[0])


def cca_nmse_bound(spec: CcaSpectrum) -> float:
    """(h_out - r) + sum_i (1 - rho_i^2); in [0, h_out]."""
    r = spec.rank
    if spec.rho.shape[0] != r:
        raise ValueError(f"spectrum length {spec.rho.shape[0]} != min(dims) {r}")
    return float((spec.h_out - r) + np.sum(1.0 - spec.rho**2))


def direct_nmse(cs: CovarianceSet, ridge_rel: float = RIDGE_REL) -> float:
    """Tr[C_YY - C_YX C_XX^-1 C_XY] / Tr(C_YY), clamped at 0.

    Evaluated as the quadratic error form at the ridged closed-form weight,
    so the ridge perturbs the result only to second order and noiseless
    linear data scores at float round-off rather than at the ridge scale.
    """
    tr_yy = float(np.trace(cs.c_yy))
    if tr_yy <= 0:
        raise ValueError("output variance trace must be positive")
    cxx = ridged(cs.c_xx, ridge_rel)
    if np.trace(cxx) <= 0:
        raise ValueError("degenerate input covariance (all-zero input)")
    w = scipy.linalg.solve(cxx, cs.c_yx.T, assume_a="pos").T
    mse_trace = tr_yy - 2.0 * float(np.sum(w * cs.c_yx)) + float(np.sum((w @ cs.c_xx) * w))
    return max(mse_trace, 0.0) / tr_yy


class CosineScoreAccumulator:
    """Streaming mean cosine distance between x_t and the residual sum x_t + y_t.

    Tokens where either vector has zero norm are skipped and counted.
    """

    def __init__(self) -> None:
        self.cosine_sum = 0.0
        self.token_count = 0
        self.skipped = 0

    def update(self, x: np.ndarray, y: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
        resid = x + y
        nx = np.linalg.norm(x, axis=0)
        nr = np.linalg.norm(resid, axis=0)
        ok = (nx > 0) & (nr > 0)
        self.skipped += int(np.sum(~ok))
        if np.any(ok):
            cos = np.sum(x[:, ok] * resid[:, ok], axis=0) / (nx[ok] * nr[ok])
            self.cosine_sum += float(np.sum(cos))
            self.token_count += int(np.sum(ok))

    def score(self) -> float:
        if self.token_count == 0:
            raise ValueError("all tokens had zero norm; cosine score undefined")
        return 1.0 - self.cosine_sum / self.token_count


def cosine_distance_score(x: np.ndarray, y: np.ndarray) -> float:
    """1 - mean_t cos(x_t, x_t + y_t); in [0, 2]. Requires h_in == h_out."""
    if np.asarray(x).shape[0] != np.asarray(y).shape[0]:
        raise ValueError("cosine criterion needs h_in == h_out")
    acc = CosineScoreAccumulator()
    acc.update(x, y)
    return acc.score()
