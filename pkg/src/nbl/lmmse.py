"""Closed-form optimal affine substitute for an attention sublayer.

W solves (C_XX + ridge*I) W^T = C_YX^T through a Cholesky factorization; the
bias recenters the means. The fit-time normalized error is recorded on the
map so reports never need the calibration data again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .cca import direct_nmse
from .spectral import RIDGE_REL, ridged
from .stats import CovarianceSet


@dataclass(frozen=True)
class LinearMap:
    weight: np.ndarray  # (h_out, h_in)
    bias: np.ndarray    # (h_out,)
    source_layer: int
    fit_nmse: float

    @property
    def h_in(self) -> int:
        return self.weight.shape[1]

    @property
    def h_out(self) -> int:
        return self.weight.shape[0]


def fit_lmmse(
    cs: CovarianceSet,
    source_layer: int = -1,
    ridge_rel: float = RIDGE_REL,
) -> LinearMap:
    """W = C_YX C_XX^-1 and b = E[Y] - W E[X] from finalized moments."""
    if cs.sample_count < 2:
        raise ValueError("need a covariance set finalized from >= 2 samples")
    cxx = ridged(cs.c_xx, ridge_rel)
    if np.trace(cxx) <= 0:
        raise ValueError("degenerate input covariance (all-zero input)")
    cho = scipy.linalg.cho_factor(cxx)
    weight = scipy.linalg.cho_solve(cho, cs.c_yx.T).T
    bias = cs.mean_y - weight @ cs.mean_x
    if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
        raise ValueError("fit produced non-finite parameters")
    return LinearMap(
        weight=weight,
        bias=bias,
        source_layer=source_layer,
        fit_nmse=direct_nmse(cs, ridge_rel),
    )


def apply(m: LinearMap, x: np.ndarray) -> np.ndarray:
    """W x + b, broadcast over columns of (h_in, N) input."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != m.h_in:
        raise ValueError(f"input shape {x.shape} incompatible with h_in={m.h_in}")
    return m.weight @ x + m.bias[:, None]


def orthogonality_residual(cs: CovarianceSet, m: LinearMap) -> float:
    """||C_YX - W C_XX||_F / ||C_YX||_F; near zero for a correct fit."""
    num = np.linalg.norm(cs.c_yx - m.weight @ cs.c_xx)
    den = np.linalg.norm(cs.c_yx)
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / den)
