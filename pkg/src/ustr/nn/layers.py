"""Functional layers over a ParamSet.

Each ``init_*`` registers parameters under a name prefix; the matching
forward function reads them back by the same prefix. Initialisation is
uniform in ``±1/sqrt(fan_in)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as F
from .params import ParamSet
from .tensor import ShapeError, Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- linear / norm --------------------------------------------------------


def init_linear(ps: ParamSet, name: str, n_in: int, n_out: int, rng, bias: bool = True, scale: float = 1.0) -> None:
    ps.add(f"{name}.weight", _uniform(rng, (n_in, n_out), n_in, scale))
    if bias:
        ps.add(f"{name}.bias", _uniform(rng, (n_out,), n_in, scale))


def linear(ps: ParamSet, name: str, x: Tensor) -> Tensor:
    y = F.matmul(x, ps[f"{name}.weight"])
    bias = f"{name}.bias"
    return y + ps[bias] if bias in ps else y


def init_layer_norm(ps: ParamSet, name: str, dim: int) -> None:
    # gain is stored as an offset from 1 so every stored value starts at 0
    ps.add(f"{name}.gain", np.zeros(dim))
    ps.add(f"{name}.bias", np.zeros(dim))


def layer_norm(ps: ParamSet, name: str, x: Tensor) -> Tensor:
    return F.layer_norm(x, ps[f"{name}.gain"] + 1.0, ps[f"{name}.bias"])


# -- attention / feed-forward ----------------------------------------------


def init_attention(ps: ParamSet, name: str, dim: int, rng) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(ps, f"{name}.{proj}", dim, dim, rng)


def multi_head_attention(
    ps: ParamSet, name: str, x: Tensor, num_heads: int, return_weights: bool = False
):
    """Non-causal scaled dot-product self-attention over x: (T, d)."""
    T, d = x.shape
    if d % num_heads:
        raise ShapeError(f"multi_head_attention: dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return F.transpose(F.reshape(t, (T, num_heads, dh)), (1, 0, 2))

    q = heads(linear(ps, f"{name}.q", x))
    k = heads(linear(ps, f"{name}.k", x))
    v = heads(linear(ps, f"{name}.v", x))
    scores = F.matmul(q, F.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    weights = F.softmax(scores, axis=-1)
    ctx = F.reshape(F.transpose(F.matmul(weights, v), (1, 0, 2)), (T, d))
    out = linear(ps, f"{name}.o", ctx)
    return (out, weights) if return_weights else out


def init_feed_forward(ps: ParamSet, name: str, dim: int, mult: int, rng) -> None:
    init_linear(ps, f"{name}.fc1", dim, dim * mult, rng)
    init_linear(ps, f"{name}.fc2", dim * mult, dim, rng)


def feed_forward(ps: ParamSet, name: str, x: Tensor) -> Tensor:
    return linear(ps, f"{name}.fc2", F.relu(linear(ps, f"{name}.fc1", x)))


# -- blocks ----------------------------------------------------------------


def init_transformer_block(ps: ParamSet, name: str, dim: int, ff_mult: int, rng) -> None:
    init_layer_norm(ps, f"{name}.ln_att", dim)
    init_attention(ps, f"{name}.att", dim, rng)
    init_layer_norm(ps, f"{name}.ln_ff", dim)
    init_feed_forward(ps, f"{name}.ff", dim, ff_mult, rng)


def transformer_block(ps: ParamSet, name: str, x: Tensor, num_heads: int) -> Tensor:
    x = x + multi_head_attention(ps, f"{name}.att", layer_norm(ps, f"{name}.ln_att", x), num_heads)
    return x + feed_forward(ps, f"{name}.ff", layer_norm(ps, f"{name}.ln_ff", x))


def init_conformer_block(ps: ParamSet, name: str, dim: int, kernel: int, ff_mult: int, rng) -> None:
    init_layer_norm(ps, f"{name}.ln_att", dim)
    init_attention(ps, f"{name}.att", dim, rng)
    init_layer_norm(ps, f"{name}.ln_conv", dim)
    ps.add(f"{name}.dwconv.weight", _uniform(rng, (kernel, dim), kernel))
    ps.add(f"{name}.dwconv.bias", np.zeros(dim))
    init_linear(ps, f"{name}.pwconv", dim, dim, rng)
    init_layer_norm(ps, f"{name}.ln_ff", dim)
    init_feed_forward(ps, f"{name}.ff", dim, ff_mult, rng)


def conformer_block(ps: ParamSet, name: str, x: Tensor, num_heads: int) -> Tensor:
    """Attention, depthwise convolution and feed-forward, each pre-norm with a residual."""
    x = x + multi_head_attention(ps, f"{name}.att", layer_norm(ps, f"{name}.ln_att", x), num_heads)
    h = layer_norm(ps, f"{name}.ln_conv", x)
    h = F.relu(F.depthwise_conv1d(h, ps[f"{name}.dwconv.weight"], ps[f"{name}.dwconv.bias"]))
    x = x + linear(ps, f"{name}.pwconv", h)
    return x + feed_forward(ps, f"{name}.ff", layer_norm(ps, f"{name}.ln_ff", x))


# -- recurrent -------------------------------------------------------------


def init_gru(ps: ParamSet, name: str, n_in: int, hidden: int, rng) -> None:
    ps.add(f"{name}.w_ih", _uniform(rng, (n_in, 3 * hidden), hidden))
    ps.add(f"{name}.w_hh", _uniform(rng, (hidden, 3 * hidden), hidden))
    ps.add(f"{name}.b_ih", _uniform(rng, (3 * hidden,), hidden))
    ps.add(f"{name}.b_hh", _uniform(rng, (3 * hidden,), hidden))


def gru_gates(gi: Tensor, h_prev: Tensor, w_hh: Tensor, b_hh: Tensor) -> Tensor:
    """GRU update given the precomputed input projection ``gi = x @ w_ih + b_ih``."""
    H = h_prev.shape[-1]
    if gi.shape[-1] != 3 * H or w_hh.shape != (H, 3 * H):
        raise ShapeError(f"gru_cell: input gates {gi.shape}, state {h_prev.shape}, w_hh {w_hh.shape}")
    gh = F.matmul(h_prev, w_hh) + b_hh
    r = F.sigmoid(gi[..., :H] + gh[..., :H])
    z = F.sigmoid(gi[..., H : 2 * H] + gh[..., H : 2 * H])
    n = F.tanh(gi[..., 2 * H :] + r * gh[..., 2 * H :])
    return n + z * (h_prev - n)


def gru_cell(x: Tensor, h_prev: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    if x.shape[-1] != w_ih.shape[0]:
        raise ShapeError(f"gru_cell: input {x.shape} vs w_ih {w_ih.shape}")
    return gru_gates(F.matmul(x, w_ih) + b_ih, h_prev, w_hh, b_hh)


def gru_sequence(ps: ParamSet, name: str, xs: Tensor, h0: Tensor | None = None) -> Tensor:
    """Run a GRU over xs: (L, n_in); returns all hidden states (L, hidden)."""
    w_hh = ps[f"{name}.w_hh"]
    H = w_hh.shape[0]
    gi_all = F.matmul(xs, ps[f"{name}.w_ih"]) + ps[f"{name}.b_ih"]
    h = h0 if h0 is not None else Tensor(np.zeros(H))
    outs = []
    for i in range(xs.shape[0]):
        h = gru_gates(gi_all[i], h, w_hh, ps[f"{name}.b_hh"])
        outs.append(h)
    return F.stack(outs, axis=0)


def gru_step(ps: ParamSet, name: str, x: Tensor, h: Tensor) -> Tensor:
    gi = F.matmul(x, ps[f"{name}.w_ih"]) + ps[f"{name}.b_ih"]
    return gru_gates(gi, h, ps[f"{name}.w_hh"], ps[f"{name}.b_hh"])
