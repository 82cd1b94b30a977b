import math

import numpy as np
import pytest

from ustr.checks import OP_TOLERANCE, op_gradient_errors
from ustr.nn import (
    AdamConfig,
    AdamState,
    ParamSet,
    ShapeError,
    Tensor,
    adam_step,
    finite_difference_check,
    global_norm,
    no_grad,
    relative_error,
    warmup_lr,
)
from ustr.nn import layers as L
from ustr.nn import tensor as F


def test_matmul_identity():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal((a @ Tensor(np.eye(2))).data, a.data)


def test_softmax_rows_sum_to_one(rng):
    s = F.softmax(Tensor(rng.normal(size=(5, 7)) * 10), axis=-1).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_log_softmax_matches_log_of_softmax(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert np.allclose(F.log_softmax(x).data, np.log(F.softmax(x).data))


def test_logsumexp_handles_neg_inf():
    x = Tensor(np.array([-np.inf, 0.0, -np.inf]))
    assert F.logsumexp(x).item() == 0.0
    assert F.logsumexp(Tensor(np.full(3, -np.inf))).item() == -np.inf


@pytest.mark.parametrize(
    "op,a,b",
    [
        (F.matmul, (2, 3), (4, 5)),
        (F.add, (2, 3), (4, 3)),
        (F.mul, (2, 3), (3, 2)),
    ],
)
def test_shape_mismatch_names_op_and_shapes(op, a, b):
    with pytest.raises(ShapeError) as exc:
        op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    msg = str(exc.value)
    assert op.__name__ in msg and str(a) in msg and str(b) in msg


def test_embedding_out_of_range():
    with pytest.raises(IndexError, match="embedding"):
        F.embedding(Tensor(np.zeros((3, 2))), [0, 3])


def test_backward_populates_finite_grads(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    F.reduce_sum(F.tanh(x @ w)).backward()
    assert np.all(np.isfinite(x.grad)) and np.all(np.isfinite(w.grad))


def test_no_grad_builds_no_graph(rng):
    w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with no_grad():
        y = w @ w
    assert not y.requires_grad and not y._parents


def test_forward_is_deterministic(rng):
    ps = ParamSet()
    L.init_conformer_block(ps, "b", 4, 3, 2, np.random.default_rng(0))
    x = Tensor(rng.normal(size=(5, 4)))
    a = L.conformer_block(ps, "b", x, 2).data
    b = L.conformer_block(ps, "b", x, 2).data
    assert a.tobytes() == b.tobytes()


def test_every_op_passes_finite_differences():
    errors = op_gradient_errors(seed=0)
    bad = {k: v for k, v in errors.items() if not v <= OP_TOLERANCE}
    assert not bad, bad


def test_gradcheck_report_flags_a_wrong_gradient():
    ps = ParamSet()
    ps.add("x", np.array([0.3, -0.2]))

    def f(p):
        x = p["x"]
        # gradient of the custom node is deliberately scaled by 2
        return F.custom(float(np.sum(x.data**2)), (x,), lambda g: x._accumulate(4 * g * x.data))

    report = finite_difference_check(f, ps)
    assert not report.ok and report.max_rel_error > 0.3


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-13)) < 1e-6
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


# -- GRU -----------------------------------------------------------------------


def test_gru_zero_weights(rng):
    H = 3
    z = lambda *s: Tensor(np.zeros(s))
    x = Tensor(rng.normal(size=4))
    assert np.array_equal(L.gru_cell(x, z(H), z(4, 3 * H), z(H, 3 * H), z(3 * H), z(3 * H)).data, np.zeros(H))
    h_prev = Tensor(rng.normal(size=H))
    h = L.gru_cell(x, h_prev, z(4, 3 * H), z(H, 3 * H), z(3 * H), z(3 * H)).data
    assert np.allclose(h, 0.5 * h_prev.data)


def test_gru_sequence_matches_steps(rng):
    ps = ParamSet()
    L.init_gru(ps, "g", 3, 4, rng)
    xs = Tensor(rng.normal(size=(5, 3)))
    seq = L.gru_sequence(ps, "g", xs).data
    h = Tensor(np.zeros(4))
    for i in range(5):
        h = L.gru_step(ps, "g", xs[i], h)
        assert np.allclose(h.data, seq[i], atol=1e-14)


def test_gru_shape_mismatch(rng):
    with pytest.raises(ShapeError, match="gru_cell"):
        L.gru_cell(Tensor(np.zeros(3)), Tensor(np.zeros(2)), Tensor(np.zeros((4, 6))),
                   Tensor(np.zeros((2, 6))), Tensor(np.zeros(6)), Tensor(np.zeros(6)))


# -- attention -------------------------------------------------------------------


def test_attention_single_position_is_value_projection(rng):
    ps = ParamSet()
    L.init_attention(ps, "a", 4, rng)
    x = Tensor(rng.normal(size=(1, 4)))
    out = L.multi_head_attention(ps, "a", x, 2).data
    v = L.linear(ps, "a.v", x)
    assert np.allclose(out, L.linear(ps, "a.o", v).data)


def test_attention_weights_rows_sum_to_one(rng):
    ps = ParamSet()
    L.init_attention(ps, "a", 4, rng)
    _, w = L.multi_head_attention(ps, "a", Tensor(rng.normal(size=(6, 4))), 2, return_weights=True)
    assert w.shape == (2, 6, 6)
    assert np.allclose(w.data.sum(-1), 1.0)


def test_attention_head_divisibility(rng):
    ps = ParamSet()
    L.init_attention(ps, "a", 4, rng)
    with pytest.raises(ShapeError):
        L.multi_head_attention(ps, "a", Tensor(np.zeros((2, 4))), 3)


# -- params and Adam ---------------------------------------------------------------


def _scalar_params(value=0.5):
    ps = ParamSet()
    ps.add("w", np.array([value]))
    return ps


def test_adam_first_step_hand_computed():
    ps = _scalar_params(0.5)
    g = 0.2
    cfg = AdamConfig(lr=0.01, beta1=0.9, beta2=0.98, eps=1e-9)
    adam_step(ps, AdamState(cfg), {"w": np.array([g])})
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.98) * g * g / (1 - 0.98)
    expected = 0.5 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-9)
    assert ps["w"].data[0] == pytest.approx(expected, abs=1e-15)


def test_adam_all_frozen_changes_nothing():
    ps = _scalar_params()
    ps.freeze(["w"])
    before = ps["w"].data.copy()
    st = AdamState()
    for _ in range(3):
        adam_step(ps, st, {})
    assert ps["w"].data.tobytes() == before.tobytes()


def test_adam_missing_gradient_names_param():
    ps = _scalar_params()
    with pytest.raises(KeyError, match="'w'"):
        adam_step(ps, AdamState(), {})


def test_adam_deterministic_trajectories(rng):
    grads = [rng.normal(size=1) for _ in range(5)]

    def run():
        ps, st = _scalar_params(), AdamState()
        for g in grads:
            adam_step(ps, st, {"w": g})
        return ps["w"].data.copy()

    assert run().tobytes() == run().tobytes()


def test_freeze_keeps_values_bit_identical(rng):
    ps = ParamSet()
    ps.add("enc.w", rng.normal(size=(2, 2)))
    ps.add("dec.w", rng.normal(size=(2, 2)))
    ps.freeze(["enc."])
    before = ps["enc.w"].data.copy()
    st = AdamState()
    for _ in range(10):
        adam_step(ps, st, {"dec.w": rng.normal(size=(2, 2))})
    assert ps["enc.w"].data.tobytes() == before.tobytes()
    assert ps.frozen_names() == ["enc.w"] and ps.trainable_names() == ["dec.w"]


def test_warmup_schedule():
    cfg = AdamConfig(lr=1e-3, warmup_frac=0.1)
    assert warmup_lr(cfg, 1, 100) == pytest.approx(1e-4)
    assert warmup_lr(cfg, 10, 100) == pytest.approx(1e-3)
    assert warmup_lr(cfg, 80, 100) == pytest.approx(1e-3)


def test_global_norm():
    assert global_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == 5.0


def test_paramset_subset_shares_tensors(rng):
    ps = ParamSet()
    ps.add("a.x", rng.normal(size=2))
    ps.add("b.x", rng.normal(size=2))
    sub = ps.subset(["a."])
    assert list(sub) == ["b.x"] and sub["b.x"] is ps["b.x"]


def test_paramset_duplicate_name():
    ps = _scalar_params()
    with pytest.raises(KeyError):
        ps.add("w", np.zeros(1))
