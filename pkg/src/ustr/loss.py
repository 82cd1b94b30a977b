"""Transducer loss, its lattice gradient, the ILMT loss, and a brute-force oracle.

Lattice convention: emitting blank at node (t, u) moves to (t+1, u);
emitting label y_{u+1} moves to (t, u+1). Every alignment ends with a blank
out of (T-1, U). Tables are (T+1, U+1): row T of ``alpha`` holds the mass
that has consumed every frame, and ``beta[T, U] = 0``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .nn import Tensor
from .nn import tensor as F


class LossError(ValueError):
    pass


@dataclass
class TransducerLattice:
    log_probs: np.ndarray  # (T, U+1, K) log-softmax of the joint logits
    labels: np.ndarray  # (U,)
    alpha: np.ndarray  # (T+1, U+1)
    beta: np.ndarray  # (T+1, U+1)
    total_log_prob: float

    @property
    def lp_blank(self) -> np.ndarray:
        return self.log_probs[:, :, 0]

    @property
    def lp_label(self) -> np.ndarray:
        T, U1, _ = self.log_probs.shape
        return self.log_probs[:, np.arange(U1 - 1), self.labels] if U1 > 1 else np.zeros((T, 0))

    @property
    def beta_total(self) -> float:
        return float(self.beta[0, 0])

    def frame_cuts(self) -> np.ndarray:
        """Per-frame logsumexp_u alpha[t,u] + blank[t,u] + beta[t+1,u]; each equals the total."""
        terms = self.alpha[:-1] + self.lp_blank + self.beta[1:]
        m = terms.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(terms - m).sum(axis=1, keepdims=True)))[:, 0]

    def occupancy(self) -> np.ndarray:
        """Posterior probability of visiting each node (t, u), t < T."""
        return np.exp(self.alpha[:-1] + self.beta[:-1] - self.total_log_prob)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check(joint: np.ndarray, labels: np.ndarray) -> None:
    if joint.ndim != 3:
        raise LossError(f"joint logits must be (T, U+1, K), got shape {joint.shape}")
    T, U1, K = joint.shape
    if T < 1:
        raise LossError("need at least one frame")
    if labels.ndim != 1 or labels.shape[0] != U1 - 1:
        raise LossError(f"{labels.shape[0]} labels do not match joint U axis of size {U1}")
    if labels.size and (labels.min() < 1 or labels.max() >= K):
        raise LossError(f"labels must lie in [1, {K - 1}]")
    if not np.all(np.isfinite(joint)):
        raise LossError("joint logits contain non-finite values")


def build_lattice(joint: np.ndarray, labels) -> TransducerLattice:
    joint = np.asarray(joint, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _check(joint, labels)
    lp = _log_softmax(joint)
    U = labels.shape[0]
    lp_blank = lp[:, :, 0]
    lp_label = lp[:, np.arange(U), labels]
    alpha, beta = _kernels.transducer_lattice(lp_blank, lp_label)
    return TransducerLattice(lp, labels, alpha, beta, float(alpha[-1, U]))


def transducer_grad(lattice: TransducerLattice, joint=None) -> np.ndarray:
    """d(-log P(y|x)) / d(joint logits), shape (T, U+1, K)."""
    lp = lattice.log_probs
    T, U1, K = lp.shape
    U = U1 - 1
    lp_blank = lp[:, :, 0]
    lp_label = lp[:, np.arange(U), lattice.labels]
    g_blank, g_label = _kernels.transducer_occupancy(
        lattice.alpha, lattice.beta, lp_blank, lp_label, lattice.total_log_prob
    )
    g = np.zeros_like(lp)
    g[:, :, 0] = g_blank
    if U:
        g[:, np.arange(U), lattice.labels] += g_label
    node = g.sum(axis=-1, keepdims=True)  # minus the node occupancy
    return g - np.exp(lp) * node


def transducer_loss(joint, labels) -> tuple[Tensor, TransducerLattice]:
    """-log sum over all alignments of P(alignment | x).

    ``joint`` may be a Tensor (the returned loss is then differentiable) or an array.
    """
    joint_t = F.as_tensor(joint)
    lattice = build_lattice(joint_t.data, labels)

    def backward(g):
        joint_t._accumulate(g * transducer_grad(lattice))

    loss = F.custom(-lattice.total_log_prob, (joint_t,), backward)
    return loss, lattice


def count_alignments(T: int, U: int) -> int:
    """Number of monotonic transducer alignments, by recursion over the lattice."""

    @functools.lru_cache(maxsize=None)
    def paths(t: int, u: int) -> int:
        # paths from node (t, u) to the end
        if t == T - 1 and u == U:
            return 1
        n = 0
        if t < T - 1:
            n += paths(t + 1, u)
        if u < U:
            n += paths(t, u + 1)
        return n

    return paths(0, 0)


def enumerate_alignments(T: int, U: int):
    """Yield each alignment as a tuple of moves ('b' = blank, 'l' = label), final blank included."""
    for label_slots in itertools.combinations(range(T - 1 + U), U):
        moves = ["b"] * (T - 1 + U)
        for i in label_slots:
            moves[i] = "l"
        yield tuple(moves) + ("b",)


def brute_force_loss(joint, labels, max_steps: int = 12) -> float:
    """Explicit sum over every alignment; test oracle for small lattices."""
    joint = np.asarray(getattr(joint, "data", joint), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _check(joint, labels)
    T, U1, _ = joint.shape
    U = U1 - 1
    if T + U > max_steps:
        raise LossError(f"lattice too large for enumeration: T + U = {T + U} > {max_steps}")
    lp = _log_softmax(joint)
    scores = []
    for moves in enumerate_alignments(T, U):
        t = u = 0
        s = 0.0
        for m in moves:
            if m == "b":
                s += lp[t, u, 0]
                t += 1
            else:
                s += lp[t, u, labels[u]]
                u += 1
        scores.append(s)
    scores = np.asarray(scores)
    top = scores.max()
    return float(-(top + math.log(np.exp(scores - top).sum())))


def ilmt_loss(ilm_logits, labels) -> Tensor:
    """Cross-entropy of the internal LM on y_1..y_U, blank excluded by renormalising over labels.

    Summed over the U predicted positions (row u predicts y_{u+1}).
    """
    logits = F.as_tensor(ilm_logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    U = labels.shape[0]
    if logits.shape[0] != U + 1:
        raise LossError(f"ilm logits have {logits.shape[0]} rows for {U} labels")
    if U == 0:
        return Tensor(0.0)
    lp = F.log_softmax(logits[:U, 1:], axis=-1)
    return -F.reduce_sum(lp[np.arange(U), labels - 1])


@dataclass(frozen=True)
class LossConfig:
    ilmt_weight: float = 0.2
    ilmt_enabled: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.ilmt_weight) and self.ilmt_weight >= 0):
            raise ValueError("ilmt_weight must be finite and >= 0")


def total_loss(rnnt, ilmt, cfg: LossConfig):
    """rnnt + weight * ilmt."""
    return rnnt + ilmt * cfg.ilmt_weight
