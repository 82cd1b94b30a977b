import math

import numpy as np
import pytest

from ustr.model import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    ExternalLm,
    LmConfig,
    TextEncoderAbsent,
    UstrConfig,
    UstrModel,
    expected_param_count,
)
from ustr.nn import ParamSet, finite_difference_check
from ustr.nn import tensor as F

from conftest import tiny_config


def test_init_deterministic():
    a = UstrModel.init(tiny_config(), 5).params
    b = UstrModel.init(tiny_config(), 5).params
    assert list(a) == list(b)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)


@pytest.mark.parametrize("cfg", [tiny_config(), tiny_config(subsampling=4, predictor_layers=2), UstrConfig()])
def test_param_count_closed_form(cfg):
    assert UstrModel.init(cfg, 0).params.num_values() == expected_param_count(cfg)


def test_init_values_finite_and_small():
    ps = UstrModel.init(UstrConfig(), 0).params
    for n, t in ps.items():
        assert np.all(np.isfinite(t.data)) and np.all(np.abs(t.data) < 1), n


def test_config_validation():
    with pytest.raises(ValueError):
        UstrConfig(subsampling=3)
    with pytest.raises(ValueError):
        UstrConfig(blank_id=1)
    with pytest.raises(ValueError):
        UstrConfig(model_dim=10, num_heads=3)


# -- encoders ------------------------------------------------------------------


def test_audio_encode_subsampling_four(rng):
    m = UstrModel.init(tiny_config(subsampling=4), 0)
    out = m.audio_encode(rng.normal(size=(8, 4)))
    assert out.values.shape == (2, 8)


@pytest.mark.parametrize("sub", [2, 4])
@pytest.mark.parametrize("T", [4, 5, 7, 9, 13])
def test_audio_encode_length(sub, T, rng):
    m = UstrModel.init(tiny_config(subsampling=sub), 0)
    assert m.audio_encode(rng.normal(size=(T, 4))).values.shape == (math.ceil(T / sub), 8)


def test_audio_encode_too_short(tiny_model, rng):
    with pytest.raises(ValueError, match="fewer than subsampling"):
        tiny_model.audio_encode(rng.normal(size=(1, 4)))


def test_text_encode_shape_matches_audio(tiny_model, rng):
    t = tiny_model.text_encode(np.array([1, 2, 2, 0, 5]))
    a = tiny_model.audio_encode(rng.normal(size=(6, 4)))
    assert t.values.shape == (5, 8)
    assert t.values.shape[1] == a.values.shape[1]


def test_text_encode_mask_token_finite(tiny_model):
    assert np.all(np.isfinite(tiny_model.text_encode(np.zeros(4, dtype=int)).values.data))


def test_text_encode_id_out_of_range(tiny_model):
    with pytest.raises(IndexError):
        tiny_model.text_encode(np.array([1, 6]))


def test_shared_encode_preserves_length_and_uses_one_param_path(tiny_model, rng):
    speech = tiny_model.audio_encode(rng.normal(size=(6, 4)))
    text = tiny_model.text_encode(np.array([1, 2, 3]))
    for x in (speech, text):
        assert tiny_model.shared_encode(x).values.shape == x.values.shape
    # both modalities push gradient into the same shared parameters
    ps = tiny_model.params
    for x in (tiny_model.audio_encode(rng.normal(size=(6, 4))), tiny_model.text_encode(np.array([1, 2, 3]))):
        ps.zero_grad()
        F.reduce_sum(tiny_model.shared_encode(x).values).backward()
        assert np.any(ps["shared_encoder.blocks.0.att.q.weight"].grad != 0)


def test_shared_encode_dim_mismatch(tiny_model):
    from ustr.model import EncoderOutput

    with pytest.raises(ValueError):
        tiny_model.shared_encode(EncoderOutput(F.Tensor(np.zeros((3, 5))), "speech"))


# -- predictor / jointer -----------------------------------------------------------


def test_predict_empty_labels(tiny_model):
    assert tiny_model.predict(np.array([], dtype=int)).shape == (1, 6)


def test_predict_prefix_property(tiny_model):
    full = tiny_model.predict(np.array([1, 4, 2, 5])).data
    part = tiny_model.predict(np.array([1, 4])).data
    assert np.array_equal(full[:3], part)


def test_predict_rejects_blank(tiny_model):
    with pytest.raises(ValueError, match="blank"):
        tiny_model.predict(np.array([1, 0]))


def test_predictor_step_matches_predict(tiny_model):
    labels = [3, 1, 5]
    rows = tiny_model.predict(np.array(labels)).data
    out, state = tiny_model.predictor_start()
    assert np.allclose(out.data, rows[0])
    for u, k in enumerate(labels, start=1):
        out, state = tiny_model.predictor_step(k, state)
        assert np.allclose(out.data, rows[u], atol=1e-14)


def test_join_shape(rng):
    m = UstrModel.init(tiny_config(output_vocab_size=4), 0)
    logits = m.join(F.Tensor(rng.normal(size=(2, 8))), m.predict(np.array([1, 2])))
    assert logits.shape == (2, 3, 5)


def test_join_rows_depend_only_on_their_frame(tiny_model, rng):
    enc = rng.normal(size=(4, 8))
    pred = tiny_model.predict(np.array([2, 3]))
    perm = np.array([2, 0, 3, 1])
    a = tiny_model.join(F.Tensor(enc), pred).data
    b = tiny_model.join(F.Tensor(enc[perm]), pred).data
    assert np.allclose(a[perm], b)


def test_ilm_equals_zero_encoder_join(tiny_model):
    pred = tiny_model.predict(np.array([1, 2, 3]))
    zero = F.Tensor(np.zeros((1, 8)))
    assert np.array_equal(tiny_model.ilm_logits(pred).data, tiny_model.join(zero, pred).data[0])


def test_ilm_independent_of_audio(tiny_model, rng):
    # ilm_logits never sees audio; the joint logits do
    pred = tiny_model.predict(np.array([4, 1]))
    a = tiny_model.ilm_logits(pred).data
    e1 = tiny_model.encode_speech(rng.normal(size=(6, 4)))
    e2 = tiny_model.encode_speech(rng.normal(size=(6, 4)))
    assert not np.allclose(tiny_model.join(e1, pred).data, tiny_model.join(e2, pred).data)
    assert np.array_equal(tiny_model.ilm_logits(pred).data, a)


def test_ilm_hand_computed():
    cfg = UstrConfig(feature_dim=2, model_dim=2, num_heads=1, shared_blocks=1, conv_channels=1, conv_kernel=3,
                     ff_mult=1, text_vocab_size=2, output_vocab_size=1, predictor_dim=2, joint_dim=2)
    m = UstrModel.init(cfg, 0)
    ps = m.params
    ps["joint.enc_proj.bias"].data[:] = [0.5, -0.25]
    ps["joint.pred_proj.weight"].data[:] = [[1.0, 0.0], [0.0, 2.0]]
    ps["joint.out.weight"].data[:] = [[1.0, -1.0], [0.5, 0.5]]
    ps["joint.out.bias"].data[:] = [0.1, 0.2]
    p = np.array([[0.2, 0.1]])
    # hidden = tanh([0.5 + 0.2, -0.25 + 0.2]) = tanh([0.7, -0.05])
    h0, h1 = math.tanh(0.7), math.tanh(-0.05)
    expected = [h0 + 0.5 * h1 + 0.1, -h0 + 0.5 * h1 + 0.2]
    assert np.allclose(m.ilm_logits(F.Tensor(p)).data, [expected], atol=1e-15)


# -- gradients through the model ------------------------------------------------------


def _check(model, f, names_prefix):
    names = [n for n in model.params if n.startswith(names_prefix)]
    rep = finite_difference_check(lambda ps: f(), model.params, names=names)
    assert rep.max_rel_error <= 1e-4, rep.failures


def test_gradcheck_audio_encoder(rng):
    m = UstrModel.init(tiny_config(feature_dim=3, conv_channels=1), 1)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(8, 1))
    _check(m, lambda: F.reduce_sum(m.audio_encode(x).values @ F.Tensor(w)), "audio_encoder.")


def test_gradcheck_shared_encoder(tiny_model, rng):
    x = F.Tensor(rng.normal(size=(4, 8)))
    w = rng.normal(size=(8, 1))
    from ustr.model import EncoderOutput

    _check(tiny_model, lambda: F.reduce_sum(tiny_model.shared_encode(EncoderOutput(x, "speech")).values @ F.Tensor(w)),
           "shared_encoder.blocks.0.conv")


def test_gradcheck_predictor_and_joint(tiny_model, rng):
    enc = F.Tensor(rng.normal(size=(2, 8)))
    labels = np.array([2, 5])
    from ustr.loss import transducer_loss

    def f():
        return transducer_loss(tiny_model.join(enc, tiny_model.predict(labels)), labels)[0]

    _check(tiny_model, f, "predictor.")
    _check(tiny_model, f, "joint.")


# -- external LM ---------------------------------------------------------------------


def test_elm_rows_normalised(rng):
    lm = ExternalLm.init(LmConfig(vocab_size=6, embed_dim=4, hidden_dim=5), 0)
    lp = lm.score(np.array([1, 6, 3])).data
    assert lp.shape == (4, 6)
    m = lp.max(axis=1)
    assert np.allclose(m + np.log(np.exp(lp - m[:, None]).sum(axis=1)), 0.0, atol=1e-6)


def test_elm_untrained_is_near_uniform():
    lm = ExternalLm.init(LmConfig(vocab_size=4), 0)
    lp = lm.score(np.array([1, 2, 3, 4, 1])).data
    assert np.all(np.abs(lp + math.log(4)) < 0.1)


def test_elm_deterministic_and_step_consistent():
    a = ExternalLm.init(LmConfig(vocab_size=5), 2)
    b = ExternalLm.init(LmConfig(vocab_size=5), 2)
    labels = np.array([3, 1])
    assert np.array_equal(a.score(labels).data, b.score(labels).data)
    rows = a.score(labels).data
    lp, h = a.step(0, None)
    assert np.allclose(lp, rows[0])
    lp, h = a.step(3, h)
    assert np.allclose(lp, rows[1])


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_model):
    tiny_model.params.freeze(["audio_encoder."])
    tiny_model.save(tmp_path / "m.ckpt", meta={"stage": "base", "step": 7})
    back, meta = UstrModel.load(tmp_path / "m.ckpt")
    assert meta["stage"] == "base" and meta["step"] == 7 and meta["text_encoder"]
    assert back.cfg == tiny_model.cfg
    assert list(back.params) == list(tiny_model.params)
    for n in back.params:
        assert back.params[n].data.tobytes() == tiny_model.params[n].data.tobytes()
        assert back.params.is_trainable(n) == tiny_model.params.is_trainable(n)


def test_stripped_checkpoint(tmp_path, tiny_model, rng):
    tiny_model.save(tmp_path / "s.ckpt", strip_text_encoder=True)
    back, meta = UstrModel.load(tmp_path / "s.ckpt")
    assert not meta["text_encoder"]
    assert not any(n.startswith("text_encoder.") for n in back.params)
    audio = rng.normal(size=(6, 4))
    pred = tiny_model.predict(np.array([1, 2]))
    a = tiny_model.join(tiny_model.encode_speech(audio), pred).data
    b = back.join(back.encode_speech(audio), back.predict(np.array([1, 2]))).data
    assert np.array_equal(a, b)
    with pytest.raises(TextEncoderAbsent, match="text encoder absent"):
        back.text_encode(np.array([1]))


def test_checkpoint_version_mismatch(tmp_path, tiny_model):
    path = tmp_path / "v.ckpt"
    tiny_model.save(path)
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        UstrModel.load(path)


def test_checkpoint_corrupt(tmp_path, tiny_model):
    path = tmp_path / "c.ckpt"
    tiny_model.save(path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="corrupt"):
        UstrModel.load(path)
    path.write_bytes(b"garbage!")
    with pytest.raises(CheckpointError, match="not a ustr checkpoint"):
        UstrModel.load(path)


def test_checkpoint_kind_mismatch(tmp_path):
    lm = ExternalLm.init(LmConfig(vocab_size=3), 0)
    lm.save(tmp_path / "lm.ckpt")
    assert (tmp_path / "lm.ckpt").read_bytes()[:8] == CHECKPOINT_MAGIC
    with pytest.raises(CheckpointError, match="elm"):
        UstrModel.load(tmp_path / "lm.ckpt")
    back, _ = ExternalLm.load(tmp_path / "lm.ckpt")
    assert back.cfg == lm.cfg
