"""Per-layer substitutability scoring and layer selection.

Lower scores mean more substitutable. The whitened-correlation bound and the
direct normalized error are both evaluated on the residual-output moments
(X, Y+X); the cosine criterion needs raw activations and is streamed over
them. Selection is either one-shot (score once, take the m lowest) or greedy
(re-score the partially substituted model every round).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import toymodel
from .cca import (
    CcaSpectrum,
    CosineScoreAccumulator,
    canonical_correlations,
    cca_nmse_bound,
    direct_nmse,
    standardized_cross_correlation,
)
from .lmmse import LinearMap, fit_lmmse
from .spectral import FLOOR_REL_DEFAULT, RIDGE_REL
from .stats import CovarianceSet, covset_from_matrices, derive_residual_covset

CRITERIA = ("cca_bound", "direct_nmse", "cosine")


@dataclass(frozen=True)
class LayerScore:
    layer_index: int
    criterion: str
    score: float
    rho_spectrum: CcaSpectrum | None = None


@dataclass(frozen=True)
class SelectionPlan:
    layers: tuple[int, ...]
    criterion: str
    strategy: str  # "one_shot" | "greedy"


def score_layer(
    cs: CovarianceSet | None,
    criterion: str,
    layer_index: int = -1,
    raw: tuple[np.ndarray, np.ndarray] | None = None,
    ridge_rel: float = RIDGE_REL,
    floor_rel: float = FLOOR_REL_DEFAULT,
) -> LayerScore:
    """Score one layer under a criterion.

    ``cs`` holds the plain (X, Y) moments; the residual-output variant is
    derived here. The cosine criterion ignores ``cs`` and requires ``raw``
    (X, Y) matrices instead.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    if criterion == "cosine":
        if raw is None:
            raise ValueError("cosine criterion requires raw activation matrices")
        acc = CosineScoreAccumulator()
        acc.update(*raw)
        return LayerScore(layer_index, criterion, acc.score())
    if cs is None:
        raise ValueError(f"{criterion} requires a covariance set")
    resid = derive_residual_covset(cs)
    if criterion == "cca_bound":
        spec = canonical_correlations(
            standardized_cross_correlation(resid, ridge_rel, floor_rel)
        )
        return LayerScore(layer_index, criterion, cca_nmse_bound(spec), spec)
    return LayerScore(layer_index, criterion, direct_nmse(resid, ridge_rel))


def select_one_shot(scores: list[LayerScore], m: int) -> SelectionPlan:
    """The m lowest scores, ties broken by lower layer index."""
    if not 0 <= m <= len(scores):
        raise ValueError(f"m={m} out of range for {len(scores)} scored layers")
    indices = {s.layer_index for s in scores}
    if len(indices) != len(scores):
        raise ValueError("duplicate layer indices in scores")
    ranked = sorted(scores, key=lambda s: (s.score, s.layer_index))
    criterion = scores[0].criterion if scores else "cca_bound"
    return SelectionPlan(
        layers=tuple(s.layer_index for s in ranked[:m]),
        criterion=criterion,
        strategy="one_shot",
    )


def greedy_select(
    model: toymodel.ToyTransformer,
    calib_ids: np.ndarray,
    context: int,
    m: int,
    criterion: str = "cca_bound",
    ridge_rel: float = RIDGE_REL,
    floor_rel: float = FLOOR_REL_DEFAULT,
) -> tuple[SelectionPlan, list[LinearMap]]:
    """m rounds of recalibrate -> score remaining -> substitute the lowest.

    Each round reuses the same calibration token stream, so runs are
    reproducible. Returns the substitution order and the maps fitted on the
    per-round (partially substituted) activations; substituting them all
    into the original model reproduces the final greedy model.
    """
    if not 0 <= m <= model.config.layers:
        raise ValueError(f"m={m} out of range for K={model.config.layers}")
    current = model
    chosen: list[int] = []
    maps: list[LinearMap] = []
    for _ in range(m):
        remaining = set(current.attention_layer_indices())
        captured, _ = toymodel.capture_activations(current, calib_ids, context, remaining)
        best: LayerScore | None = None
        covsets: dict[int, CovarianceSet] = {}
        for k in sorted(remaining):
            x, y = captured[k]
            covsets[k] = covset_from_matrices(x, y)
            s = score_layer(
                covsets[k], criterion, k, raw=captured[k],
                ridge_rel=ridge_rel, floor_rel=floor_rel,
            )
            if best is None or (s.score, s.layer_index) < (best.score, best.layer_index):
                best = s
        fitted = fit_lmmse(covsets[best.layer_index], best.layer_index, ridge_rel)
        current = toymodel.substitute(current, [best.layer_index], [fitted])
        chosen.append(best.layer_index)
        maps.append(fitted)
    plan = SelectionPlan(layers=tuple(chosen), criterion=criterion, strategy="greedy")
    return plan, maps
