import numpy as np
import pytest

from nbl import ranking, stats, toymodel

from conftest import rng


def scores_from(values):
    return [
        ranking.LayerScore(layer_index=i, criterion="cca_bound", score=v)
        for i, v in enumerate(values)
    ]


def test_identity_block_scores_zero():
    # a layer whose sublayer output is identically zero passes X straight through
    x = rng(0).standard_normal((6, 400))
    cs = stats.covset_from_matrices(x, np.zeros_like(x))
    s = ranking.score_layer(cs, "cca_bound", 3)
    assert s.layer_index == 3
    assert 0.0 <= s.score <= 1e-5
    assert s.rho_spectrum is not None


def test_independent_residual_scores_near_dim():
    # Y = Z - X makes the residual output Z independent of X
    g = rng(1)
    x = g.standard_normal((4, 100_000))
    z = g.standard_normal((4, 100_000))
    cs = stats.covset_from_matrices(x, z - x)
    s = ranking.score_layer(cs, "cca_bound")
    assert s.score >= 0.9 * 4


def test_direct_nmse_never_exceeds_bound_on_toy_layers(tiny_model):
    ids = toymodel.synthetic_tokens(tiny_model.config.vocab, 3000, 7)
    cap, _ = toymodel.capture_activations(
        tiny_model, ids, 32, set(range(tiny_model.config.layers))
    )
    for k, (x, y) in cap.items():
        cs = stats.covset_from_matrices(x, y)
        bound = ranking.score_layer(cs, "cca_bound", k).score
        direct = ranking.score_layer(cs, "direct_nmse", k).score
        assert direct <= bound + 1e-9
        assert 0.0 <= bound <= tiny_model.config.dim


def test_cosine_requires_raw():
    cs = stats.covset_from_matrices(
        rng(2).standard_normal((3, 50)), rng(3).standard_normal((3, 50))
    )
    with pytest.raises(ValueError, match="raw"):
        ranking.score_layer(cs, "cosine")
    x = rng(4).standard_normal((3, 50))
    s = ranking.score_layer(None, "cosine", 1, raw=(x, np.zeros_like(x)))
    assert s.score == pytest.approx(0.0, abs=1e-12)


def test_unknown_criterion():
    with pytest.raises(ValueError):
        ranking.score_layer(None, "entropy")


def test_select_one_shot_basic():
    plan = ranking.select_one_shot(scores_from([0.5, 0.2, 0.9]), 2)
    assert plan.layers == (1, 0)
    assert plan.strategy == "one_shot"


def test_select_one_shot_tie_break_and_full():
    plan = ranking.select_one_shot(scores_from([0.7, 0.7, 0.7]), 2)
    assert plan.layers == (0, 1)
    plan = ranking.select_one_shot(scores_from([0.3, 0.1, 0.2]), 3)
    assert plan.layers == (1, 2, 0)


def test_select_one_shot_validation():
    with pytest.raises(ValueError):
        ranking.select_one_shot(scores_from([0.1]), 2)
    dup = scores_from([0.1, 0.2])
    dup[1] = ranking.LayerScore(0, "cca_bound", 0.2)
    with pytest.raises(ValueError, match="duplicate"):
        ranking.select_one_shot(dup, 1)


def test_select_one_shot_permutation_invariant_and_monotone():
    g = rng(5)
    values = list(g.uniform(0, 1, size=8))
    base = ranking.select_one_shot(scores_from(values), 3)
    shuffled = scores_from(values)
    order = g.permutation(8)
    shuffled = [shuffled[i] for i in order]
    assert ranking.select_one_shot(shuffled, 3).layers == base.layers
    for m in range(8):
        small = set(ranking.select_one_shot(scores_from(values), m).layers)
        big = set(ranking.select_one_shot(scores_from(values), m + 1).layers)
        assert small <= big


def test_scale_invariance_of_criteria():
    g = rng(6)
    x = g.standard_normal((5, 4000))
    y = g.standard_normal((5, 5)) @ x + 0.3 * g.standard_normal((5, 4000))
    cs = stats.covset_from_matrices(x, y)
    cs_scaled = stats.covset_from_matrices(2.5 * x, 2.5 * y)
    a = ranking.score_layer(cs, "cca_bound").score
    b = ranking.score_layer(cs_scaled, "cca_bound").score
    assert abs(a - b) <= 1e-6
    # common scaling cannot reorder direct_nmse scores
    a2 = ranking.score_layer(cs, "direct_nmse").score
    b2 = ranking.score_layer(cs_scaled, "direct_nmse").score
    assert a2 == pytest.approx(b2, rel=1e-9)


def test_greedy_single_round_matches_one_shot(tiny_model):
    ids = toymodel.synthetic_tokens(tiny_model.config.vocab, 2000, 8)
    plan1, maps1 = ranking.greedy_select(tiny_model, ids, 32, 1)
    cap, _ = toymodel.capture_activations(
        tiny_model, ids, 32, set(range(tiny_model.config.layers))
    )
    scores = [
        ranking.score_layer(stats.covset_from_matrices(*cap[k]), "cca_bound", k)
        for k in sorted(cap)
    ]
    one_shot = ranking.select_one_shot(scores, 1)
    assert plan1.layers == one_shot.layers
    assert plan1.strategy == "greedy"
    assert maps1[0].source_layer == plan1.layers[0]


def test_greedy_full_substitution(tiny_model):
    ids = toymodel.synthetic_tokens(tiny_model.config.vocab, 1500, 9)
    k = tiny_model.config.layers
    plan, maps = ranking.greedy_select(tiny_model, ids, 32, k)
    assert sorted(plan.layers) == list(range(k))
    assert len(set(plan.layers)) == k
    final = toymodel.substitute(tiny_model, plan, maps)
    assert final.attention_layer_indices() == []
    logits, _ = toymodel.forward(final, ids[:20])
    assert np.isfinite(logits).all()


def test_greedy_validation(tiny_model):
    with pytest.raises(ValueError):
        ranking.greedy_select(tiny_model, np.arange(10), 8, 99)
