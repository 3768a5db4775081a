"""Streaming means and unbiased (cross-)covariances of paired activations.

Accumulation keeps raw sums in float64; at desk scale (N up to ~1e6 tokens)
this stays well below the 1e-10 relative tolerances the tests pin, and raw
sums merge trivially across workers. Normalization is the unbiased N-1 form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MomentAccumulator:
    """Raw first and second moments of paired columns (x_t, y_t)."""

    h_in: int
    h_out: int
    count: int = 0

    def __post_init__(self) -> None:
        if self.h_in < 1 or self.h_out < 1:
            raise ValueError("feature dims must be >= 1")
        self.sum_x = np.zeros(self.h_in)
        self.sum_y = np.zeros(self.h_out)
        self.sum_xx = np.zeros((self.h_in, self.h_in))
        self.sum_yy = np.zeros((self.h_out, self.h_out))
        self.sum_yx = np.zeros((self.h_out, self.h_in))


@dataclass(frozen=True)
class CovarianceSet:
    """Finalized sufficient statistics of a layer's (input, output) pair."""

    mean_x: np.ndarray
    mean_y: np.ndarray
    c_xx: np.ndarray
    c_yy: np.ndarray
    c_yx: np.ndarray
    sample_count: int

    @property
    def h_in(self) -> int:
        return self.mean_x.shape[0]

    @property
    def h_out(self) -> int:
        return self.mean_y.shape[0]


def accumulate(acc: MomentAccumulator, x: np.ndarray, y: np.ndarray) -> MomentAccumulator:
    """Fold a batch of paired columns into ``acc`` (updated in place)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("activation matrices must be 2-D (features x tokens)")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"token counts differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] != acc.h_in or y.shape[0] != acc.h_out:
        raise ValueError(
            f"feature dims ({x.shape[0]}, {y.shape[0]}) do not match "
            f"accumulator ({acc.h_in}, {acc.h_out})"
        )
    acc.count += x.shape[1]
    acc.sum_x += x.sum(axis=1)
    acc.sum_y += y.sum(axis=1)
    acc.sum_xx += x @ x.T
    acc.sum_yy += y @ y.T
    acc.sum_yx += y @ x.T
    return acc


def merge(a: MomentAccumulator, b: MomentAccumulator) -> MomentAccumulator:
    """Combine two accumulators; equals accumulating the concatenated data."""
    if (a.h_in, a.h_out) != (b.h_in, b.h_out):
        raise ValueError("accumulator dims differ")
    out = MomentAccumulator(a.h_in, a.h_out)
    out.count = a.count + b.count
    out.sum_x = a.sum_x + b.sum_x
    out.sum_y = a.sum_y + b.sum_y
    out.sum_xx = a.sum_xx + b.sum_xx
    out.sum_yy = a.sum_yy + b.sum_yy
    out.sum_yx = a.sum_yx + b.sum_yx
    return out


def finalize(acc: MomentAccumulator) -> CovarianceSet:
    """Means and unbiased covariances; auto-covariances are symmetrized."""
    n = acc.count
    if n < 2:
        raise ValueError(f"need at least 2 samples, have {n}")
    mean_x = acc.sum_x / n
    mean_y = acc.sum_y / n
    c_xx = (acc.sum_xx - n * np.outer(mean_x, mean_x)) / (n - 1)
    c_yy = (acc.sum_yy - n * np.outer(mean_y, mean_y)) / (n - 1)
    c_yx = (acc.sum_yx - n * np.outer(mean_y, mean_x)) / (n - 1)
    # round-off can leave the auto-covariances slightly asymmetric
    c_xx = (c_xx + c_xx.T) / 2
    c_yy = (c_yy + c_yy.T) / 2
    return CovarianceSet(mean_x, mean_y, c_xx, c_yy, c_yx, n)


def covset_from_matrices(x: np.ndarray, y: np.ndarray) -> CovarianceSet:
    """One-shot convenience: accumulate a single (X, Y) pair and finalize."""
    acc = MomentAccumulator(np.asarray(x).shape[0], np.asarray(y).shape[0])
    accumulate(acc, x, y)
    return finalize(acc)


def derive_residual_covset(cs: CovarianceSet) -> CovarianceSet:
    """Moments of (X, Y+X) from the moments of (X, Y).

    Valid because the skip-add is linear in the same samples; requires equal
    feature dims, which holds for attention sublayers.
    """
    if cs.h_in != cs.h_out:
        raise ValueError(f"residual add needs h_in == h_out, got {cs.h_in} != {cs.h_out}")
    mean_yp = cs.mean_y + cs.mean_x
    c_ypx = cs.c_yx + cs.c_xx
    c_ypyp = cs.c_yy + cs.c_yx + cs.c_yx.T + cs.c_xx
    c_ypyp = (c_ypyp + c_ypyp.T) / 2
    return CovarianceSet(cs.mean_x, mean_yp, cs.c_xx, c_ypyp, c_ypx, cs.sample_count)
