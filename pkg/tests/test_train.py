import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilora.errors import ConfigError, ContractError, FormatError, NumericError, TruncatedFileError, VersionError
from bilora.evaluate import eval_subset
from bilora.lora import count_params
from bilora.model import CaptionModel, ModelConfig
from bilora.tensor import Tensor
from bilora.train import (
    AdamState, Checkpoint, LoraConfig, TrainConfig, adam_step, base_hash, load_checkpoint,
    prepare_finetune, save_checkpoint, train,
)

TINY = TrainConfig(stage="finetune", epochs=50, batch_size=8, learning_rate=3e-3, early_stop=False)


# -- config


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.epochs, c.batch_size) == (1e-3, 20, 32)
    assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-8)
    assert (c.lora.r, c.lora.alpha, c.lora.dropout) == (16, 32.0, 0.05)
    assert TrainConfig.full_scale_preset().learning_rate == 5e-5


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": 0.0}, {"epochs": 0}, {"batch_size": -1}, {"stage": "warmup"},
    {"lora": LoraConfig(dropout=1.0)}, {"lora": LoraConfig(r=0)}, {"lora": LoraConfig(targets=("gate",))},
])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_round_trip():
    c = TrainConfig(stage="pretrain", families=("fam_a",), lora=LoraConfig(r=4, targets=("value", "query")))
    assert TrainConfig.from_dict(c.to_dict()) == c


# -- Adam


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step(state, [p], [np.zeros(2)], lr=1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_hand_example():
    p = Tensor(np.array(0.5), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step(state, [p], [np.array(2.0)], lr=1e-3)
    assert state.m[0] == pytest.approx(0.2, abs=1e-15)
    assert state.v[0] == pytest.approx(0.004, abs=1e-15)
    m_hat, v_hat = state.m[0] / (1 - 0.9), state.v[0] / (1 - 0.999)
    assert m_hat == pytest.approx(2.0) and v_hat == pytest.approx(4.0)
    assert 0.5 - p.item() == pytest.approx(1e-3 * 2.0 / (2.0 + 1e-8), rel=1e-12)


def test_adam_frozen_or_missing_gradient_untouched():
    frozen = Tensor(np.ones(3))
    absent = Tensor(np.ones(3), requires_grad=True)
    state = AdamState.for_params([frozen, absent])
    adam_step(state, [frozen, absent], [np.ones(3), None], lr=0.1)
    np.testing.assert_array_equal(frozen.data, 1.0)
    np.testing.assert_array_equal(absent.data, 1.0)


def test_adam_nonfinite_gradient_names_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NumericError, match="dec.head.W"):
        adam_step(AdamState.for_params([p]), [p], [np.array([1.0, np.inf])], 1e-3, names=["dec.head.W"])


def test_adam_misaligned():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        adam_step(AdamState.for_params([p]), [p], [], 1e-3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-4, 1e-1))
def test_adam_matches_scalar_reference(grads, lr):
    """Independent scalar re-derivation of the update over a gradient sequence."""
    p = Tensor(np.array([0.3]), requires_grad=True)
    state = AdamState.for_params([p])
    theta, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        adam_step(state, [p], [np.array([g])], lr)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert state.v[0][0] >= 0
    assert p.data[0] == pytest.approx(theta, rel=1e-12, abs=1e-15)


# -- checkpoints


@pytest.fixture
def small_ckpt():
    model = CaptionModel(ModelConfig(d_model=16, heads=2, encoder_layers=1, decoder_layers=1, seed=5))
    return Checkpoint.from_model(model, TrainConfig(), "pretrain", {"note": "x"})


def test_checkpoint_round_trip_bit_exact(small_ckpt, tmp_path):
    path = tmp_path / "c.blra"
    save_checkpoint(small_ckpt, path)
    back = load_checkpoint(path)
    assert list(back.tensors) == list(small_ckpt.tensors)
    for k, v in small_ckpt.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
    assert back.config_blob() == small_ckpt.config_blob()
    save_checkpoint(back, tmp_path / "d.blra")
    assert (tmp_path / "d.blra").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(small_ckpt, tmp_path):
    path = tmp_path / "c.blra"
    save_checkpoint(small_ckpt, path)
    raw = path.read_bytes()
    assert raw[:4] == b"BLRA"
    assert struct.unpack("<II", raw[4:12]) == (1, len(small_ckpt.tensors))
    (n,) = struct.unpack("<H", raw[12:14])
    assert raw[14:14 + n].decode() == next(iter(small_ckpt.tensors))


def test_bad_magic(small_ckpt, tmp_path):
    path = tmp_path / "c.blra"
    save_checkpoint(small_ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert not isinstance(info.value, (VersionError, TruncatedFileError))


def test_version_mismatch(small_ckpt, tmp_path):
    path = tmp_path / "c.blra"
    save_checkpoint(small_ckpt, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [6, 40, -3])
def test_truncated_file(small_ckpt, tmp_path, cut):
    path = tmp_path / "c.blra"
    save_checkpoint(small_ckpt, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(path)


def test_trailing_garbage(small_ckpt, tmp_path):
    path = tmp_path / "c.blra"
    save_checkpoint(small_ckpt, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(path)


# -- training


def test_finetune_requires_adapters(mid_base, tiny_manifest):
    with pytest.raises(ContractError):
        train(mid_base.to_model(), tiny_manifest, TINY)


def test_pretrain_rejects_adapters(mid_base, tiny_manifest):
    model = prepare_finetune(mid_base, TINY)
    with pytest.raises(ContractError):
        train(model, tiny_manifest, TrainConfig(stage="pretrain"))


def test_empty_train_split(mid_base, tiny_manifest):
    from bilora.data import DatasetManifest
    empty = DatasetManifest([r for r in tiny_manifest.records if r.split != "train"], root=tiny_manifest.root)
    with pytest.raises(ContractError):
        train(prepare_finetune(mid_base, TINY), empty, TINY)


def test_nan_loss_reports_coordinates(mid_base, tiny_manifest):
    model = prepare_finetune(mid_base, TINY)
    model.params["dec.head.b"].data[0] = np.nan
    with pytest.raises(NumericError, match="epoch 1, batch 0"):
        train(model, tiny_manifest, TINY)


@pytest.fixture(scope="module")
def tiny_run(mid_base, tiny_manifest):
    model = prepare_finetune(mid_base, TINY)
    before = base_hash(model)
    result = train(model, tiny_manifest, TINY, return_result=True)
    return model, before, result


def test_overfits_tiny_set(tiny_run, tiny_manifest):
    _, _, result = tiny_run
    model = result.checkpoint.to_model()
    recs = tiny_manifest.select("train")
    preds = model.predict(tiny_manifest.load_images(recs))
    assert [p == r.label for p, r in zip(preds, recs)] == [True] * 8


def test_loss_decreases_over_first_steps(tiny_run):
    losses = [h["loss"] for h in tiny_run[2].history]
    assert all(a > b for a, b in zip(losses[:5], losses[1:6]))


def test_finetune_keeps_base_frozen(tiny_run):
    model, before, result = tiny_run
    assert base_hash(model) == before
    assert base_hash(result.checkpoint.to_model()) == before


def test_trainable_census_matches_budget(tiny_run):
    model = tiny_run[0]
    cfg = model.config
    expected = count_params(cfg.decoder_layers, cfg.d_model, 2, TINY.lora.r, frozen_total=model.num_params())
    assert sum(t.data.size for t in model.trainable_parameters()) == expected.trainable == 8192


def test_checkpoint_keeps_best_val_epoch(tiny_run):
    result = tiny_run[2]
    accs = [h["val_acc"] for h in result.history]
    assert result.best_epoch == 1 + int(np.argmax(accs))


def test_same_seed_same_checkpoint_bytes(mid_base, tiny_manifest, tmp_path):
    cfg = TrainConfig(stage="finetune", epochs=3, batch_size=4, seed=9)
    paths = []
    for i in range(2):
        ck = train(prepare_finetune(mid_base, cfg), tiny_manifest, cfg)
        paths.append(tmp_path / f"{i}.blra")
        save_checkpoint(ck, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_load_then_eval_matches(tiny_run, tiny_manifest, tmp_path):
    ck = tiny_run[2].checkpoint
    path = tmp_path / "ft.blra"
    save_checkpoint(ck, path)
    a = eval_subset(ck, tiny_manifest, "fam_a")
    b = eval_subset(load_checkpoint(path), tiny_manifest, "fam_a")
    assert (a.acc, a.f1, a.confusion) == (b.acc, b.f1, b.confusion)


def test_adapter_checkpoint_restores_adapters(tiny_run):
    ck = tiny_run[2].checkpoint
    model = ck.to_model()
    assert set(model.adapters) == {(0, "key"), (0, "query"), (1, "key"), (1, "query")}
    assert all(not p.requires_grad for p in model.params.values())


def test_pretrain_attribute_words(mid_base):
    attrs = mid_base.to_model().attributes
    assert attrs["real"] == "plain"
    assert len(set(attrs.values())) == len(attrs) == 6
