import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ustr.loss import (
    LossConfig,
    LossError,
    brute_force_loss,
    build_lattice,
    count_alignments,
    enumerate_alignments,
    ilmt_loss,
    total_loss,
    transducer_grad,
    transducer_loss,
)
from ustr.nn import Tensor, numeric_grad, relative_error


def _instance(rng, T, U, K):
    return rng.normal(size=(T, U + 1, K)), rng.integers(1, K, size=U)


def test_single_path_uniform():
    loss, lat = transducer_loss(np.zeros((1, 1, 5)), [])
    assert loss.item() == pytest.approx(math.log(5), abs=1e-12)
    assert brute_force_loss(np.zeros((1, 1, 5)), []) == pytest.approx(math.log(5), abs=1e-12)


def test_two_frames_one_label_matches_oracle(rng):
    joint, labels = _instance(rng, 2, 1, 4)
    loss, _ = transducer_loss(joint, labels)
    assert abs(loss.item() - brute_force_loss(joint, labels)) <= 1e-9


def test_two_frames_one_label_has_two_alignments():
    paths = list(enumerate_alignments(2, 1))
    assert len(paths) == 2 == count_alignments(2, 1)
    assert set(paths) == {("l", "b", "b"), ("b", "l", "b")}


@pytest.mark.parametrize("T,U", [(1, 0), (1, 3), (2, 2), (3, 2), (4, 3), (5, 4)])
def test_enumeration_count_matches_recursion(T, U):
    paths = list(enumerate_alignments(T, U))
    assert len(paths) == len(set(paths)) == count_alignments(T, U) == math.comb(T - 1 + U, U)
    assert all(p[-1] == "b" and p.count("b") == T and p.count("l") == U for p in paths)


def test_dp_matches_oracle_200_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        T, U, K = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 6))
        joint, labels = _instance(rng, T, U, K)
        worst = max(worst, abs(transducer_loss(joint, labels)[0].item() - brute_force_loss(joint, labels)))
    assert worst <= 1e-9


def test_oracle_rejects_large():
    with pytest.raises(LossError, match="too large"):
        brute_force_loss(np.zeros((10, 4, 3)), [1, 1, 1])


def test_node_shift_invariance(rng):
    joint, labels = _instance(rng, 3, 2, 4)
    base = transducer_loss(joint, labels)[0].item()
    shifted = joint.copy()
    shifted[1, 2] += 7.5
    assert transducer_loss(shifted, labels)[0].item() == pytest.approx(base, abs=1e-12)


@given(st.integers(1, 6), st.integers(0, 5), st.integers(2, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_lattice_invariants(T, U, K, seed):
    joint, labels = _instance(np.random.default_rng(seed), T, U, K)
    lat = build_lattice(joint, labels)
    assert lat.alpha[0, 0] == 0.0
    assert abs(lat.total_log_prob - lat.beta_total) <= 1e-9
    assert np.allclose(lat.frame_cuts(), lat.total_log_prob, atol=1e-9, rtol=0)
    g = transducer_grad(lat)
    assert np.allclose(g.sum(axis=-1), 0.0, atol=1e-9)


def test_extreme_logits_stay_finite(rng):
    joint, labels = _instance(rng, 6, 4, 5)
    joint *= 300
    loss, lat = transducer_loss(joint, labels)
    assert np.isfinite(loss.item())
    assert np.all(np.isfinite(transducer_grad(lat)))


def test_unreachable_nodes_get_zero_gradient(rng):
    # blank is impossible at (0, 0), so node (1, 0) carries no forward mass
    joint, labels = _instance(rng, 2, 1, 3)
    joint[0, 0, 0] = -1e300
    lat = build_lattice(joint, labels)
    assert lat.alpha[1, 0] < -1e200
    g = transducer_grad(lat)
    assert np.allclose(g[1, 0], 0.0, atol=1e-12)


def test_gradient_finite_difference():
    rng = np.random.default_rng(5)
    for _ in range(20):
        T, U, K = int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(2, 5))
        joint, labels = _instance(rng, T, U, K)
        analytic = transducer_grad(build_lattice(joint, labels))
        numeric = numeric_grad(lambda: -build_lattice(joint, labels).total_log_prob, joint, 1e-5)
        assert relative_error(analytic, numeric) <= 1e-6


def test_loss_tensor_backward(rng):
    joint, labels = _instance(rng, 3, 2, 4)
    z = Tensor(joint, requires_grad=True)
    loss, lat = transducer_loss(z, labels)
    loss.backward()
    assert np.allclose(z.grad, transducer_grad(lat))


def test_label_logit_monotone_on_last_frame(rng):
    # on the final frame a pending label can only be emitted, never skipped by blank
    for _ in range(20):
        joint, labels = _instance(rng, 3, 2, 4)
        g = transducer_grad(build_lattice(joint, labels))
        for u in range(2):
            assert g[-1, u, labels[u]] <= 1e-12


def test_label_logit_not_monotone_everywhere():
    # a strong correct-label logit at (0, 0) can still raise the loss when the
    # continuation after that label is poor; the sanity property is local, not global
    joint = np.zeros((2, 2, 3))
    joint[0, 0] = [0.0, 3.0, 0.0]  # label very likely at (0, 0)
    joint[0, 1] = [-6.0, 0.0, 0.0]  # but blank after it is unlikely
    labels = np.array([1])
    g = transducer_grad(build_lattice(joint, labels))
    assert g[0, 0, 1] > 0


@pytest.mark.parametrize(
    "joint,labels,msg",
    [
        (np.zeros((2, 3)), [1], "must be"),
        (np.zeros((0, 1, 3)), [], "at least one frame"),
        (np.zeros((2, 3, 4)), [1], "do not match"),
        (np.zeros((2, 2, 4)), [4], "labels must lie"),
        (np.zeros((2, 2, 4)), [0], "labels must lie"),
        (np.full((2, 2, 4), np.nan), [1], "non-finite"),
    ],
)
def test_loss_errors(joint, labels, msg):
    with pytest.raises(LossError, match=msg):
        transducer_loss(joint, labels)


# -- ILMT ---------------------------------------------------------------------


def test_ilmt_uniform():
    labels = np.array([1, 3, 4, 2])
    assert ilmt_loss(np.zeros((5, 5)), labels).item() == pytest.approx(4 * math.log(4))


def test_ilmt_ignores_blank_column():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 5))
    other = z.copy()
    other[:, 0] += 40.0
    labels = np.array([2, 4])
    assert ilmt_loss(z, labels).item() == pytest.approx(ilmt_loss(other, labels).item(), abs=1e-12)


def test_ilmt_confident_limit():
    labels = np.array([1, 3])
    z = np.zeros((3, 5))
    z[0, 1] = z[1, 3] = 60.0
    assert ilmt_loss(z, labels).item() < 1e-20


def test_ilmt_empty_and_errors():
    assert ilmt_loss(np.zeros((1, 4)), []).item() == 0.0
    with pytest.raises(LossError):
        ilmt_loss(np.zeros((2, 4)), [1, 2])


def test_ilmt_gradient(rng):
    labels = np.array([3, 1, 2])
    z0 = rng.normal(size=(4, 4))
    z = Tensor(z0.copy(), requires_grad=True)
    ilmt_loss(z, labels).backward()
    numeric = numeric_grad(lambda: ilmt_loss(z0, labels).item(), z0, 1e-5)
    assert relative_error(z.grad, numeric) <= 1e-6


# -- combination --------------------------------------------------------------


def test_total_loss():
    assert total_loss(1.0, 0.5, LossConfig(0.2)) == pytest.approx(1.1)
    assert total_loss(1.3, 0.5, LossConfig(0.0)) == 1.3
    assert total_loss(1.3, 0.0, LossConfig(1.0)) == 1.3


@pytest.mark.parametrize("w", [-0.1, float("inf"), float("nan")])
def test_loss_config_rejects(w):
    with pytest.raises(ValueError):
        LossConfig(w)
