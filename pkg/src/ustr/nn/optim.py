from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_frac: float = 0.1
    clip_norm: float | None = 5.0


@dataclass
class AdamState:
    config: AdamConfig = field(default_factory=AdamConfig)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def warmup_lr(cfg: AdamConfig, step: int, total_steps: int | None) -> float:
    """Linear warmup over the first ``warmup_frac`` of training, then flat."""
    if not total_steps or cfg.warmup_frac <= 0:
        return cfg.lr
    warm = max(1, int(round(cfg.warmup_frac * total_steps)))
    return cfg.lr * min(1.0, step / warm)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(
    params: ParamSet,
    state: AdamState,
    grads: dict[str, np.ndarray],
    lr: float | None = None,
) -> AdamState:
    """One Adam update of every trainable parameter, in place.

    Frozen parameters are skipped entirely: their values and moments are
    never touched. Raises ``KeyError`` if a trainable parameter has no entry
    in ``grads``.
    """
    cfg = state.config
    names = params.trainable_names()
    missing = [n for n in names if grads.get(n) is None]
    if missing:
        raise KeyError(f"missing gradient for trainable parameter {missing[0]!r}")
    if not names:
        return state
    state.step += 1
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for n in names:
        g = grads[n]
        p = params[n].data
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p)
            state.v[n] = np.zeros_like(p)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state
