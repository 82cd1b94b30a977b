"""Finite-difference gradient checks for the lattice loss and every nn op.

Used by the ``grad-check`` command and the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from . import loss as LS
from .nn import ParamSet, finite_difference_check, numeric_grad, relative_error
from .nn import layers as L
from .nn import tensor as F

LATTICE_TOLERANCE = 1e-6
OP_TOLERANCE = 1e-4
EPS = 1e-4


def lattice_gradient_errors(n_instances: int = 20, seed: int = 0) -> list[float]:
    """Relative error of the analytic lattice gradient w.r.t. joint logits, one per random instance."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_instances):
        T, U, K = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 6))
        joint = rng.normal(size=(T, U + 1, K))
        labels = rng.integers(1, K, size=U)
        analytic = LS.transducer_grad(LS.build_lattice(joint, labels))
        numeric = numeric_grad(lambda: -LS.build_lattice(joint, labels).total_log_prob, joint, EPS)
        errors.append(relative_error(analytic, numeric))
    return errors


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _op_cases(rng):
    """name -> (params, f(params) -> scalar tensor)."""
    cases = {}

    def add(name, arrays, f):
        ps = ParamSet()
        for k, v in arrays.items():
            ps.add(k, np.asarray(v, dtype=np.float64))
        cases[name] = (ps, f)

    w = rng.normal(size=(5,))  # random projection so every output element matters

    def proj(t):
        flat = F.reshape(t, (-1,))
        n = flat.shape[0]
        c = np.resize(w, n)
        return F.reduce_sum(flat * c)

    add("add_mul_div", {"a": rng.normal(size=(3, 4)), "b": rng.uniform(1, 2, size=(4,))},
        lambda p: proj((p["a"] + p["b"]) * p["a"] / p["b"] - p["b"]))
    add("matmul", {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))}, lambda p: proj(p["a"] @ p["b"]))
    add("tanh_sigmoid", {"x": rng.normal(size=(4, 3))}, lambda p: proj(F.tanh(p["x"]) * F.sigmoid(p["x"])))
    add("relu", {"x": _away_from_zero(rng, (4, 3))}, lambda p: proj(F.relu(p["x"])))
    add("exp_log", {"x": rng.uniform(0.5, 2.0, size=(6,))}, lambda p: proj(F.log(p["x"]) + F.exp(p["x"] * 0.3)))
    add("reshape_transpose", {"x": rng.normal(size=(2, 3, 4))},
        lambda p: proj(F.transpose(F.reshape(p["x"], (6, 4)), (1, 0))))
    add("take", {"x": rng.normal(size=(5, 3))}, lambda p: proj(p["x"][np.array([0, 2, 2, 4])] + p["x"][1:3].T.T[0]))
    add("embedding", {"e": rng.normal(size=(6, 3))}, lambda p: proj(F.embedding(p["e"], np.array([1, 5, 1, 0]))))
    add("concat_stack", {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(4, 3))},
        lambda p: proj(F.concat([p["a"], p["b"]], axis=0)) + proj(F.stack([p["a"], p["a"] * 2.0], axis=1)))
    add("reduce", {"x": rng.normal(size=(3, 4))},
        lambda p: proj(F.reduce_sum(p["x"], axis=0)) + proj(F.reduce_mean(p["x"], axis=1, keepdims=True)))
    add("logsumexp", {"x": rng.normal(size=(3, 5))}, lambda p: proj(F.logsumexp(p["x"], axis=-1)))
    add("softmax", {"x": rng.normal(size=(3, 5))}, lambda p: proj(F.softmax(p["x"], axis=-1)))
    add("log_softmax", {"x": rng.normal(size=(3, 5))}, lambda p: proj(F.log_softmax(p["x"], axis=0)))
    add("layer_norm", {"x": rng.normal(size=(4, 6)), "g": rng.normal(size=(6,)), "b": rng.normal(size=(6,))},
        lambda p: proj(F.layer_norm(p["x"], p["g"], p["b"])))
    add("conv1d", {"x": rng.normal(size=(7, 3)), "w": rng.normal(size=(3, 3, 4)), "b": rng.normal(size=(4,))},
        lambda p: proj(F.conv1d(p["x"], p["w"], p["b"], stride=2, padding=1)))
    add("depthwise_conv1d", {"x": rng.normal(size=(6, 3)), "w": rng.normal(size=(5, 3)), "b": rng.normal(size=(3,))},
        lambda p: proj(F.depthwise_conv1d(p["x"], p["w"], p["b"])))
    add("conv2d", {"x": rng.normal(size=(2, 5, 4)), "w": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=(3,))},
        lambda p: proj(F.conv2d(p["x"], p["w"], p["b"], stride=(2, 1), padding=(1, 1))))

    def layer_case(name, init, fwd, x_shape):
        ps = ParamSet()
        init(ps, np.random.default_rng(rng.integers(1 << 31)))
        ps.add("x", rng.normal(size=x_shape))
        cases[name] = (ps, lambda p: proj(fwd(p, p["x"])))

    layer_case("linear", lambda ps, r: L.init_linear(ps, "lin", 4, 3, r), lambda p, x: L.linear(p, "lin", x), (5, 4))
    layer_case("attention", lambda ps, r: L.init_attention(ps, "att", 4, r),
               lambda p, x: L.multi_head_attention(p, "att", x, num_heads=2), (5, 4))
    layer_case("feed_forward", lambda ps, r: L.init_feed_forward(ps, "ff", 4, 2, r),
               lambda p, x: L.feed_forward(p, "ff", x), (3, 4))
    layer_case("transformer_block", lambda ps, r: L.init_transformer_block(ps, "tb", 4, 2, r),
               lambda p, x: L.transformer_block(p, "tb", x, num_heads=2), (5, 4))
    layer_case("conformer_block", lambda ps, r: L.init_conformer_block(ps, "cb", 4, 3, 2, r),
               lambda p, x: L.conformer_block(p, "cb", x, num_heads=2), (5, 4))
    layer_case("gru", lambda ps, r: L.init_gru(ps, "gru", 4, 3, r), lambda p, x: L.gru_sequence(p, "gru", x), (4, 4))

    labels = np.array([2, 1, 3])
    add("ilmt_loss", {"z": rng.normal(size=(4, 4))}, lambda p: LS.ilmt_loss(p["z"], labels))
    add("transducer_loss", {"z": rng.normal(size=(3, 4, 4))}, lambda p: LS.transducer_loss(p["z"], labels)[0])
    return cases


def op_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, (ps, f) in _op_cases(rng).items():
        out[name] = finite_difference_check(f, ps, eps=EPS, tolerance=OP_TOLERANCE).max_rel_error
    return out


def run_suite(seed: int = 0) -> list[dict]:
    lattice = lattice_gradient_errors(20, seed)
    rows = [{"name": "lattice", "max_rel_error": max(lattice), "tolerance": LATTICE_TOLERANCE}]
    rows += [{"name": n, "max_rel_error": e, "tolerance": OP_TOLERANCE} for n, e in op_gradient_errors(seed).items()]
    for r in rows:
        r["ok"] = r["max_rel_error"] <= r["tolerance"]
    return rows
