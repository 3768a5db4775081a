"""Hot numeric kernels for the toy transformer forward pass.

The O(n^2) causal attention core dominates calibration runtime, so it is
JIT-compiled with numba when available. Setting ``NBL_NUMBA=0`` (or numba
failing to import) selects a vectorized pure-numpy path instead. Both paths
compute the same quantities; they agree to float64 round-off but are not
bitwise identical, so stay on one backend within a reproducibility run.

Projections and MLP matmuls are left to BLAS; only the attention core is
hand-written. See benchmarks/bench_attention.py for a backend comparison.
"""

from __future__ import annotations

import math
import os

import numpy as np
import scipy.special


def _numba_enabled() -> bool:
    flag = os.environ.get("NBL_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


if _numba_enabled():
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False


def _causal_core_np(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal grouped-query attention, vectorized.

    q: (B, n, h, hd); k, v: (B, n, g, hd) with g dividing h.
    Returns the per-head context (B, n, h, hd).
    """
    b, n, h, hd = q.shape
    g = k.shape[2]
    group_size = h // g
    kh = np.repeat(k, group_size, axis=2)
    vh = np.repeat(v, group_size, axis=2)
    scores = np.einsum("bqhd,bkhd->bhqk", q, kh) / math.sqrt(hd)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return np.einsum("bhqk,bkhd->bqhd", probs, vh)


def causal_attention_probs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Attention probability rows (B, h, n, n) of the numpy path, for checks."""
    b, n, h, hd = q.shape
    g = k.shape[2]
    kh = np.repeat(k, h // g, axis=2)
    scores = np.einsum("bqhd,bkhd->bhqk", q, kh) / math.sqrt(hd)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def _gelu_np(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + scipy.special.erf(u / math.sqrt(2.0)))


if HAVE_NUMBA:

    @njit(cache=True)
    def _gelu_nb(u):  # pragma: no cover - exercised via dispatch
        out = np.empty_like(u)
        uf = u.reshape(u.size)
        of = out.reshape(out.size)
        root2 = math.sqrt(2.0)
        for i in range(uf.size):
            of[i] = 0.5 * uf[i] * (1.0 + math.erf(uf[i] / root2))
        return out

    @njit(cache=True)
    def _causal_core_nb(q, k, v):  # pragma: no cover - exercised via dispatch
        b, n, h, hd = q.shape
        g = k.shape[2]
        group_size = h // g
        inv_scale = 1.0 / math.sqrt(hd)
        ctx = np.empty_like(q)
        row = np.empty(n)
        for bi in range(b):
            for head in range(h):
                grp = head // group_size
                for i in range(n):
                    mx = -1e300
                    for j in range(i + 1):
                        s = 0.0
                        for d in range(hd):
                            s += q[bi, i, head, d] * k[bi, j, grp, d]
                        s *= inv_scale
                        row[j] = s
                        if s > mx:
                            mx = s
                    denom = 0.0
                    for j in range(i + 1):
                        e = math.exp(row[j] - mx)
                        row[j] = e
                        denom += e
                    for d in range(hd):
                        acc = 0.0
                        for j in range(i + 1):
                            acc += row[j] * v[bi, j, grp, d]
                        ctx[bi, i, head, d] = acc / denom
        return ctx


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _causal_core_nb(
            np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v)
        )
    return _causal_core_np(q, k, v)


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


def rmsnorm(x: np.ndarray, scale: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * scale


def gelu(u: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _gelu_nb(np.ascontiguousarray(u))
    return _gelu_np(u)
