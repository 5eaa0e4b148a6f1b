from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import perturbed
from vguide.errors import ConfigurationError, ShapeError, VocabError
from vguide.guidance import (
    GuidanceConfig, GuidanceState, RankBy, advance_state, build_filter_sets, generate, observe,
    sample_token, sample_unguided, token_posteriors, weighted_distribution, weighted_logits,
)
from vguide.model import Control, ControlledSequence, ModelConfig, ModelParameters, sequence_log_prob

CFG = ModelConfig(vocab_size=24, context_length=16, embed_dim=8, num_layers=1, num_heads=2, seed=4)
NEUTRAL = SimpleNamespace(alpha=1.0, class_bias=np.zeros(2))


@pytest.fixture(scope="module")
def base():
    return perturbed(ModelParameters.init(CFG), scale=0.6, seed=1)


@pytest.fixture(scope="module")
def disc():
    p = perturbed(ModelParameters.init(CFG), scale=0.6, seed=2)
    p.tensors["alpha"] = np.array(1.7)
    p.tensors["class_bias"] = np.array([0.3, -0.1])
    return p


def prob_vectors(n):
    return arrays(np.float64, n, elements=st.floats(0.01, 1.0)).map(lambda a: a / a.sum())


# --- posteriors ----------------------------------------------------------------


def test_two_token_hand_example():
    state = GuidanceState(lp_pos=np.log([0.9, 0.1]), lp_neg=np.log([0.1, 0.9]))
    np.testing.assert_allclose(token_posteriors(state, NEUTRAL), [0.9, 0.1], atol=1e-12)


def test_symmetric_discriminator_gives_half(tiny_params):
    state = observe(GuidanceState(), tiny_params, [10, 11])
    np.testing.assert_allclose(token_posteriors(state, tiny_params), 0.5, atol=1e-12)


def test_uninitialized_state_rejected():
    with pytest.raises(ValueError):
        token_posteriors(GuidanceState(), NEUTRAL)
    with pytest.raises(ValueError):
        advance_state(GuidanceState(), 0)


@given(st.floats(-50, 50), st.floats(-20, 0), st.floats(-20, 0), st.integers(0, 30))
def test_posterior_invariance_to_shared_offset(shift, a, b, t):
    lp_pos, lp_neg = np.log([0.2, 0.3, 0.5]), np.log([0.6, 0.3, 0.1])
    s1 = GuidanceState(a, b, t, lp_pos, lp_neg)
    s2 = GuidanceState(a + shift, b + shift, t, lp_pos, lp_neg)
    np.testing.assert_allclose(token_posteriors(s1, NEUTRAL), token_posteriors(s2, NEUTRAL),
                               atol=1e-12)


def test_advance_matches_from_scratch(disc):
    body = [7, 3, 19, 5]
    state = GuidanceState()
    for i, tok in enumerate(body):
        state = advance_state(observe(state, disc, body[:i]), tok)
        assert state.t == i + 1 and not state.ready
    pos = sequence_log_prob(disc, ControlledSequence.conditioned(body, Control.POS))
    neg = sequence_log_prob(disc, ControlledSequence.conditioned(body, Control.NEG))
    assert state.ll_pos == pytest.approx(pos, abs=1e-9)
    assert state.ll_neg == pytest.approx(neg, abs=1e-9)


def test_advance_symmetric_keeps_scores_equal(tiny_params):
    s = advance_state(observe(GuidanceState(), tiny_params, []), 9)
    assert s.ll_pos == s.ll_neg


def test_advance_rejects_out_of_range(disc):
    state = observe(GuidanceState(), disc, [])
    with pytest.raises(VocabError):
        advance_state(state, CFG.vocab_size)


# --- weighted distribution -------------------------------------------------------


def test_weighted_hand_example():
    p = weighted_distribution(np.log([0.5, 0.3, 0.2]), np.array([0.2, 0.5, 0.9]), 1.0)
    np.testing.assert_allclose(p, [0.2326, 0.3488, 0.4186], atol=1e-3)


def test_w_zero_is_base_exactly():
    base = np.log([0.5, 0.3, 0.2])
    np.testing.assert_array_equal(weighted_logits(base, np.log([0.1, 0.2, 0.3]), 0.0), base)
    np.testing.assert_allclose(weighted_distribution(base, np.array([0.2, 0.5, 0.9]), 0.0),
                               [0.5, 0.3, 0.2], atol=1e-15)


def test_large_w_picks_posterior_argmax():
    p = weighted_distribution(np.log([0.5, 0.3, 0.2]), np.array([0.2, 0.5, 0.9]), 50.0)
    assert int(np.argmax(p)) == 2


def test_length_mismatch():
    with pytest.raises(ShapeError):
        weighted_distribution(np.zeros(3), np.full(2, 0.5), 1.0)


@given(prob_vectors(6), arrays(np.float64, 6, elements=st.floats(0.01, 0.99)),
       st.floats(0.0, 8.0))
def test_weighted_is_normalized(base, post, w):
    p = weighted_distribution(np.log(base), post, w)
    assert abs(p.sum() - 1.0) < 1e-12 and (p >= 0).all()


@given(st.floats(0.01, 0.98), st.floats(0.01, 0.98), st.floats(0.01, 5.0))
def test_argmax_monotonicity(p1, p2, w):
    assume(abs(p1 - p2) > 1e-6)
    out = weighted_distribution(np.log([0.4, 0.4, 0.2]), np.array([p1, p2, 0.5]), w)
    assert (out[0] > out[1]) == (p1 > p2)


# --- filter sets -----------------------------------------------------------------


def test_filter_hand_example():
    sets = build_filter_sets([0.4, 0.4, 0.2], [0.9, 0.5, 0.2], 0.7, 0.95)
    assert sets.ranked.tolist() == [0, 1, 2]
    assert sets.m == 2 and sets.v_k.tolist() == [0, 1]


def test_filter_tau_subset():
    sets = build_filter_sets([0.1, 0.1, 0.8], [0.9, 0.5, 0.2], 0.05, 0.85)
    assert sets.v_tau.tolist() == [0]
    assert set(sets.v_tau) <= set(sets.v_k)


def test_filter_full_vocab():
    sets = build_filter_sets([0.2, 0.3, 0.5], [0.1, 0.2, 0.3], 1.0, 0.0)
    assert sets.v_k.tolist() == [0, 1, 2]


def test_ties_rank_by_id():
    sets = build_filter_sets([0.25] * 4, [0.5, 0.7, 0.5, 0.7], 0.3, 1.0)
    assert sets.ranked.tolist() == [1, 3, 0, 2]


def test_rank_by_weighted_switch():
    sets = build_filter_sets([0.1, 0.6, 0.3], [0.9, 0.2, 0.5], 0.5, 1.0, RankBy.WEIGHTED)
    assert sets.ranked.tolist() == [1, 2, 0] and sets.v_k.tolist() == [1]


@given(prob_vectors(8), arrays(np.float64, 8, elements=st.floats(0.0, 1.0)),
       st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_set_laws_and_minimality(p_w, post, rho, tau):
    sets = build_filter_sets(p_w, post, rho, tau)
    v_k = set(sets.v_k.tolist())
    assert v_k and v_k <= set(range(8))
    assert set(sets.v_tau.tolist()) <= v_k and set(sets.v_rank.tolist()) <= v_k
    assert set(sets.v_rank.tolist()) == set(sets.ranked[: sets.m].tolist())
    mass = np.cumsum(p_w[sets.ranked])
    if sets.m < 8:
        assert mass[sets.m - 1] >= rho - 1e-12
    if sets.m > 1:
        assert mass[sets.m - 2] < rho - 1e-12


# --- sampler and generation -------------------------------------------------------


def test_sample_token_respects_mask():
    rng = np.random.default_rng(0)
    allowed = np.array([False, True, False, True])
    draws = {sample_token(np.zeros(4), allowed, 1.0, rng) for _ in range(200)}
    assert draws == {1, 3}


def test_greedy_sampling():
    rng = np.random.default_rng(0)
    assert sample_token(np.log([0.2, 0.5, 0.3]), np.ones(3, bool), 0.0, rng) == 1


def test_config_validation():
    for kwargs in [dict(w=-1), dict(rho=0.0), dict(rho=1.1), dict(tau=1.5), dict(temperature=-1)]:
        with pytest.raises(ConfigurationError):
            GuidanceConfig(**kwargs)
    assert GuidanceConfig(rank_by="weighted").rank_by is RankBy.WEIGHTED


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_reduction_to_unguided(base, disc, seed):
    cfg = GuidanceConfig(w=0.0, rho=1.0, tau=0.0, temperature=0.9, max_new_tokens=10)
    guided = generate(base, disc, [5, 6], cfg, seed=seed)
    plain = sample_unguided(base, [5, 6], 0.9, 10, seed=seed)
    assert guided.tokens == plain.tokens and guided.stop_reason == plain.stop_reason
    assert all(step.kept == CFG.vocab_size for step in guided.trace)


def test_generation_deterministic_and_traced(base, disc):
    cfg = GuidanceConfig(max_new_tokens=8)
    a = generate(base, disc, [5], cfg, seed=11)
    b = generate(base, disc, [5], cfg, seed=11)
    assert a.tokens == b.tokens and a.trace == b.trace
    assert len(a.trace) == len(a.tokens) + (a.stop_reason == "eos")
    assert all(1 <= s.kept <= CFG.vocab_size and 0 < s.posterior < 1 for s in a.trace)


def test_greedy_generation_deterministic(base, disc):
    cfg = GuidanceConfig(temperature=0.0, max_new_tokens=6)
    assert generate(base, disc, [4], cfg, seed=1).tokens == generate(base, disc, [4], cfg, seed=2).tokens


def test_context_stop(base, disc):
    res = generate(base, disc, list(range(5, 19)), GuidanceConfig(max_new_tokens=50), seed=0)
    assert res.stop_reason in ("context", "eos")
    assert len(res.tokens) + 15 <= CFG.context_length + 1


def test_vocab_mismatch(base):
    other = ModelParameters.init(ModelConfig(vocab_size=30, context_length=16, embed_dim=8,
                                             num_layers=1, num_heads=2))
    with pytest.raises(ConfigurationError):
        generate(base, other, [5], GuidanceConfig())
