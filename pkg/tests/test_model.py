import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import perturbed
from vguide.errors import CheckpointError, ConfigurationError, ContextLengthError
from vguide.model import (
    Control, ControlledSequence, ModelConfig, ModelParameters, checkpoint_vocab_hash, forward,
    load_checkpoint, next_token_logprobs, parameter_layout, save_checkpoint, sequence_log_prob,
)
from vguide.tokenizer import BOS, CTRL_NEG, CTRL_POS


@pytest.fixture(scope="module")
def jittered():
    cfg = ModelConfig(vocab_size=40, context_length=12, embed_dim=8, num_layers=2, num_heads=2,
                      seed=1)
    return perturbed(ModelParameters.init(cfg), scale=0.5)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ConfigurationError):
        ModelConfig(context_length=1)


def test_layout_matches_init(tiny_params):
    assert [(n, tiny_params.tensors[n].shape) for n in tiny_params.names()] == \
        parameter_layout(tiny_params.config)
    assert tiny_params.alpha == 1.0
    assert tiny_params.class_bias.tolist() == [0.0, 0.0]


def test_init_is_seeded(tiny_config):
    a, b = ModelParameters.init(tiny_config), ModelParameters.init(tiny_config)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.names())


def test_output_is_normalized(jittered):
    ids = np.random.default_rng(0).integers(0, 40, size=(3, 12))
    lp = forward(jittered, ids).data
    assert lp.shape == (3, 12, 40)
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-10)


@given(st.lists(st.integers(0, 39), min_size=2, max_size=12), st.data())
def test_causality(jittered, ids, data):
    cut = data.draw(st.integers(1, len(ids) - 1))
    changed = list(ids)
    for i in range(cut, len(ids)):
        changed[i] = (changed[i] + 7) % 40
    a = forward(jittered, [ids]).data[0, :cut]
    b = forward(jittered, [changed]).data[0, :cut]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_last_only_matches_full(jittered):
    ids = [0, 5, 9, 33, 2]
    full = forward(jittered, [ids]).data[0, -1]
    np.testing.assert_allclose(next_token_logprobs(jittered, ids), full, atol=1e-12)


def test_context_limits(jittered):
    with pytest.raises(ContextLengthError):
        forward(jittered, [list(range(13))])
    with pytest.raises(ContextLengthError):
        next_token_logprobs(jittered, [])


def test_sequence_log_prob_sums_next_token_terms(jittered):
    seq = ControlledSequence.conditioned([7, 8, 9], Control.POS)
    expected = sum(
        next_token_logprobs(jittered, seq.tokens[:i])[seq.tokens[i]] for i in range(1, 4)
    )
    assert sequence_log_prob(jittered, seq) == pytest.approx(expected)
    assert sequence_log_prob(jittered, ControlledSequence((BOS,))) == 0.0


def test_symmetric_init_is_neutral(tiny_params):
    body = [10, 20, 30]
    pos = sequence_log_prob(tiny_params, ControlledSequence.conditioned(body, Control.POS))
    neg = sequence_log_prob(tiny_params, ControlledSequence.conditioned(body, Control.NEG))
    assert pos == neg


def test_controlled_sequence_checks():
    with pytest.raises(ValueError):
        ControlledSequence(())
    with pytest.raises(ValueError):
        ControlledSequence((BOS, 5), Control.POS)
    with pytest.raises(ValueError):
        ControlledSequence((CTRL_POS, 5), Control.POS, label=Control.NONE)
    with pytest.raises(ValueError):
        ControlledSequence((BOS, 5, 6), loss_mask=(1.0,))
    seq = ControlledSequence.conditioned([5, 6], Control.POS, label=Control.POS)
    flipped = seq.with_control(Control.NEG)
    assert flipped.tokens == (CTRL_NEG, 5, 6) and flipped.label is Control.POS
    assert Control.NONE.token == BOS


def test_checkpoint_roundtrip(jittered, small_vocab, tmp_path, tiny_config):
    path = tmp_path / "m.ckpt"
    save_checkpoint(jittered, path)
    again = load_checkpoint(path)
    assert again.config == jittered.config
    for name in jittered.names():
        np.testing.assert_array_equal(again.tensors[name], jittered.tensors[name])
        assert again.tensors[name].shape == jittered.tensors[name].shape
    assert checkpoint_vocab_hash(path) == "00" * 32

    params = ModelParameters.init(tiny_config)
    save_checkpoint(params, path, small_vocab)
    assert checkpoint_vocab_hash(path) == small_vocab.sha256()
    load_checkpoint(path, small_vocab)


def test_checkpoint_vocab_mismatch(tiny_params, small_vocab, tmp_path):
    from vguide.tokenizer import build_vocab

    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, path, small_vocab)
    other = build_vocab(["different text entirely"] * 3, small_vocab.size)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)
    with pytest.raises(CheckpointError):
        save_checkpoint(tiny_params, path, build_vocab(["x"], 300))


@pytest.mark.parametrize("corrupt", [
    lambda b: b"NOTMAGIC" + b[8:],
    lambda b: b[:8] + b"\x02\x00\x00\x00" + b[12:],
    lambda b: b[:-8],
    lambda b: b + b"\x00",
])
def test_checkpoint_corruption(jittered, tmp_path, corrupt):
    path = tmp_path / "m.ckpt"
    save_checkpoint(jittered, path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
