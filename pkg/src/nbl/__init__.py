"""Toolkit for swapping transformer attention sublayers with fitted linear maps.

Calibration activations stream in through the .nbla dump format, moments
accumulate into covariance sets, layers are ranked by a whitened-correlation
error bound (or rival criteria), and the chosen layers are replaced by
closed-form least-error affine maps. An analytic cost model reports the
prefill and KV-cache consequences.
"""

from .cca import (
    CcaSpectrum,
    canonical_correlations,
    cca_nmse_bound,
    cosine_distance_score,
    direct_nmse,
    standardized_cross_correlation,
)
from .costmodel import (
    InferenceProfile,
    cache_table,
    kv_cache_bytes,
    kv_cache_gib,
    prefill_cost,
    prefill_speedup,
)
from .dumpio import DumpHeader, read_dump, read_dump_file, write_dump, write_dump_file
from .lmmse import LinearMap, apply, fit_lmmse, orthogonality_residual
from .ranking import LayerScore, SelectionPlan, greedy_select, score_layer, select_one_shot
from .spectral import EigenPair, inv_sqrt_psd, singular_values, sym_eig
from .stats import (
    CovarianceSet,
    MomentAccumulator,
    accumulate,
    covset_from_matrices,
    derive_residual_covset,
    finalize,
    merge,
)
from .toymodel import (
    ToyConfig,
    ToyTransformer,
    forward,
    forward_batch,
    init_random,
    load_model,
    logit_drift,
    perplexity,
    save_model,
    substitute,
)

__version__ = "0.1.0"
