"""Symmetric eigendecomposition, PSD inverse square root, singular values.

Decompositions are delegated to LAPACK via numpy/scipy; this module pins the
conventions the rest of the package relies on (ascending eigenvalues,
descending singular values, eigenvalue floor, shared ridge scale).

Calibration covariances can be rank-deficient (N < d, collinear features),
so the inverse square root floors eigenvalues at ``floor_rel * lambda_max``
and a relative ridge is added to C_XX before any inversion or whitening.
Spectral ops run in float64 even when dumps are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# relative ridge applied to C_XX before inversion/whitening (shared with lmmse)
RIDGE_REL = 1e-8
# relative eigenvalue floor for PSD inverse square roots
FLOOR_REL_DEFAULT = 1e-10


@dataclass(frozen=True)
class EigenPair:
    values: np.ndarray   # ascending
    vectors: np.ndarray  # orthonormal columns


def sym_eig(m: np.ndarray) -> EigenPair:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    scale = np.abs(m).max()
    if scale > 0 and np.abs(m - m.T).max() > 1e-8 * scale:
        raise ValueError("matrix is not symmetric within 1e-8 relative")
    values, vectors = scipy.linalg.eigh(m)
    return EigenPair(values, vectors)


def inv_sqrt_psd(m: np.ndarray, floor_rel: float = FLOOR_REL_DEFAULT) -> np.ndarray:
    """V diag(max(lambda, floor_rel*lambda_max))^(-1/2) V^T for symmetric PSD m."""
    if floor_rel <= 0:
        raise ValueError("floor_rel must be positive")
    pair = sym_eig(m)
    lam_max = pair.values[-1]
    if lam_max <= 0:
        raise ValueError("matrix has no positive eigenvalue; cannot form inverse square root")
    lam = np.maximum(pair.values, floor_rel * lam_max)
    root = pair.vectors * (1.0 / np.sqrt(lam))
    out = root @ pair.vectors.T
    return (out + out.T) / 2


def singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values of m, descending, length min(rows, cols)."""
    m = np.asarray(m, dtype=np.float64)
    return np.linalg.svd(m, compute_uv=False)


def ridge_scale(c_xx: np.ndarray, ridge_rel: float = RIDGE_REL) -> float:
    """Absolute ridge for C_XX: ridge_rel * trace/dim."""
    c_xx = np.asarray(c_xx)
    return ridge_rel * float(np.trace(c_xx)) / c_xx.shape[0]


def ridged(c_xx: np.ndarray, ridge_rel: float = RIDGE_REL) -> np.ndarray:
    c_xx = np.asarray(c_xx, dtype=np.float64)
    return c_xx + ridge_scale(c_xx, ridge_rel) * np.eye(c_xx.shape[0])
