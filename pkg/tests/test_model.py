import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilora import tensor as T
from bilora.errors import ConfigError, ContractError
from bilora.model import (
    ABSTAIN, BOS, EOS, PAD, Caption, CaptionModel, ModelConfig, caption_to_label, seq_loss,
)
from bilora.tensor import Tensor


@pytest.fixture(scope="module")
def model():
    return CaptionModel(ModelConfig(seed=11))


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 32, 32, 3))


class ScriptedModel(CaptionModel):
    """Decoder whose next-token logits follow a fixed script, one row per step."""

    def __init__(self, script):
        super().__init__(ModelConfig(d_model=8, heads=2, encoder_layers=1, decoder_layers=1))
        self.script = [np.asarray(s, float) for s in script]

    def next_token_logits(self, prefix, tokens):
        step = tokens.shape[1] - 1
        row = self.script[min(step, len(self.script) - 1)]
        return np.tile(row, (tokens.shape[0], 1))


def logits_ranking(vocab, *words):
    row = np.zeros(len(vocab))
    for rank, w in enumerate(words):
        row[vocab.index(w)] = 10.0 - rank
    return row


# -- config


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=63)
    with pytest.raises(ConfigError):
        ModelConfig(vocab=(PAD, BOS, EOS, "real"))
    with pytest.raises(ConfigError):
        ModelConfig(vocab=(PAD, BOS, EOS, "real", "fake", "fake"))


def test_config_round_trip():
    cfg = ModelConfig(d_model=32, seed=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_default_vocab_has_sixteen_tokens():
    assert len(ModelConfig().vocab) == 16


# -- encoder


def test_encode_shape(model):
    assert model.encode_image(images(1)[0]).shape == (16, 64)
    assert model.encode_image(images(3)).shape == (3, 16, 64)


def test_encode_rejects_wrong_size(model):
    with pytest.raises(ContractError):
        model.encode_image(np.zeros((28, 28, 3)))


def test_constant_image_gives_equal_patch_embeddings(model):
    emb = model.patch_embed(np.full((32, 32, 3), 0.3)).data[0]
    assert np.abs(emb - emb[0]).max() == 0.0


def test_one_pixel_changes_tokens(model):
    a = images(1)[0]
    b = a.copy()
    b[5, 17, 1] += 0.2
    ta, tb = model.encode_image(a).data, model.encode_image(b).data
    assert np.abs(ta - tb).max() > 1e-6


# -- bridge


def test_bridge_returns_query_count(model):
    assert model.bridge(model.encode_image(images(1)[0])).shape == (4, 64)
    tokens = Tensor(np.random.default_rng(0).normal(size=(2, 9, 64)))
    assert model.bridge(tokens).shape == (2, 4, 64)


def test_bridge_ignores_token_order(model):
    tokens = np.random.default_rng(1).normal(size=(16, 64))
    perm = np.random.default_rng(2).permutation(16)
    a = model.bridge(Tensor(tokens)).data
    b = model.bridge(Tensor(tokens[perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_queries_give_identical_outputs():
    m = CaptionModel(ModelConfig(seed=2))
    m.params["bridge.query"].data[...] = 0.0
    out = m.bridge(m.encode_image(images(1)[0])).data
    assert np.abs(out - out[0]).max() < 1e-12


# -- decoding


def test_eos_first_gives_empty_caption():
    m = ScriptedModel([logits_ranking(ModelConfig().vocab, EOS, "fake")])
    cap = m.generate_caption(images(1)[0], 4)
    assert cap.tokens == () and cap.text == ""
    assert caption_to_label(cap) is ABSTAIN


def test_forced_fake_then_eos():
    vocab = ModelConfig().vocab
    m = ScriptedModel([logits_ranking(vocab, "fake"), logits_ranking(vocab, EOS)])
    cap = m.generate_caption(images(1)[0], 4)
    assert cap.text == "fake" and cap.tokens == (vocab.index("fake"),)


def test_tie_goes_to_lowest_index():
    vocab = ModelConfig().vocab
    row = np.zeros(len(vocab))
    row[vocab.index("real")] = row[vocab.index("fake")] = 5.0
    m = ScriptedModel([row, logits_ranking(vocab, EOS)])
    assert m.generate_caption(images(1)[0]).text == "real"


def test_stops_at_max_len():
    vocab = ModelConfig().vocab
    m = ScriptedModel([logits_ranking(vocab, "tone")])
    assert m.generate_caption(images(1)[0], 2).text == "tone tone"
    assert len(m.generate_caption(images(1)[0]).tokens) == 4


def test_max_len_must_be_positive(model):
    with pytest.raises(ContractError):
        model.generate_caption(images(1)[0], 0)


def test_generation_is_deterministic(model):
    imgs = images(6, seed=3)
    assert model.generate(imgs) == model.generate(imgs)


def test_batched_generation_matches_single(model):
    imgs = images(4, seed=4)
    assert model.generate(imgs) == [model.generate_caption(im) for im in imgs]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_predict_is_total(seed):
    m = CaptionModel(ModelConfig(seed=seed % 7))
    for label in m.predict(images(3, seed)):
        assert label in (0, 1) or label is ABSTAIN


# -- labels


@pytest.mark.parametrize("text,label", [("fake", 1), ("real", 0), ("fake tone", 1), ("real fake", 0)])
def test_caption_to_label(text, label):
    assert caption_to_label(Caption((), text)) == label


def test_out_of_protocol_caption_abstains():
    assert caption_to_label(Caption((), "blue bedroom")) is ABSTAIN
    assert caption_to_label(Caption((), "")) is ABSTAIN


# -- loss


def test_uniform_logits_give_log_vocab():
    loss = seq_loss(Tensor(np.zeros((3, 4))), [1, 2, 3], pad_id=0)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)
    assert loss.item() == pytest.approx(1.3863, abs=5e-5)


def test_perfect_logits_give_zero_loss():
    targets = [1, 3, 2]
    logits = np.full((3, 4), -1e3)
    logits[np.arange(3), targets] = 1e3
    assert seq_loss(Tensor(logits), targets).item() < 1e-12


def test_pad_positions_excluded():
    logits = np.random.default_rng(0).normal(size=(4, 5))
    full = seq_loss(Tensor(logits[:2]), [3, 2]).item()
    padded = seq_loss(Tensor(logits), [3, 2, 0, 0]).item()
    assert padded == pytest.approx(full, abs=1e-14)


def test_seq_loss_length_mismatch():
    with pytest.raises(ContractError):
        seq_loss(Tensor(np.zeros((3, 4))), [1, 2])


def test_seq_loss_gradient():
    logits = Tensor(np.random.default_rng(5).normal(size=(2, 3, 6)), requires_grad=True)
    assert T.grad_check(lambda: seq_loss(logits, [[1, 4, 2], [5, 2, 0]]), [logits]) < 1e-4


def test_teacher_forcing_layout(model):
    idx = model.token_index
    inputs, targets = model.teacher_forcing(["fake", "real tone"])
    np.testing.assert_array_equal(inputs, [[idx[BOS], idx["fake"], idx[PAD]], [idx[BOS], idx["real"], idx["tone"]]])
    np.testing.assert_array_equal(targets, [[idx["fake"], idx[EOS], idx[PAD]], [idx["real"], idx["tone"], idx[EOS]]])


def test_model_loss_gradient_reaches_every_parameter():
    m = CaptionModel(ModelConfig(d_model=16, heads=2, encoder_layers=1, decoder_layers=1, seed=1))
    T.backward(m.loss(images(2), ["fake", "real"]))
    missing = [k for k, t in m.params.items() if t.grad is None or not np.any(t.grad)]
    assert missing == []


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([4, 8, 16]), st.sampled_from([(16, 2), (24, 3), (32, 4)]), st.integers(1, 6))
def test_shapes_hold_for_valid_configs(patch, dims, queries):
    d_model, heads = dims
    cfg = ModelConfig(patch=patch, d_model=d_model, heads=heads, query_tokens=queries,
                      encoder_layers=1, decoder_layers=1)
    m = CaptionModel(cfg)
    toks = m.encode_image(images(2))
    assert toks.shape == (2, (32 // patch) ** 2, d_model)
    assert m.bridge(toks).shape == (2, queries, d_model)
    caps = m.generate(images(2))
    assert all(len(c.tokens) <= cfg.max_caption_len for c in caps)
