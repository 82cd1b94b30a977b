"""Greedy and beam-search transducer decoding with ILME fusion.

Token sequences here are transducer labels (1..V); blank is 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .loss import transducer_loss
from .model import ExternalLm, UstrModel
from .nn import Tensor, no_grad

MAX_SYMBOLS_PER_FRAME = 10


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    lambda_ilm: float = 0.0
    lambda_elm: float = 0.0
    beam: int = 1

    def __post_init__(self):
        if self.lambda_ilm < 0 or self.lambda_elm < 0:
            raise ValueError("fusion weights must be >= 0")
        if self.beam < 1:
            raise ValueError("beam width must be >= 1")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score_am: float
    score_ilm: float = 0.0
    score_elm: float = 0.0
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if 0 in self.tokens:
            raise DecodeError("hypothesis tokens must not contain blank")


def fused_score(h: Hypothesis, cfg: FusionConfig) -> float:
    return h.score_am + cfg.lambda_elm * h.score_elm - cfg.lambda_ilm * h.score_ilm


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return z - math.log(np.exp(z).sum())


class _Scorer:
    """Per-utterance cache of predictor, ILM and ELM outputs keyed by label prefix."""

    def __init__(self, model: UstrModel, elm: ExternalLm | None, need_ilm: bool):
        self.model = model
        self.elm = elm
        self.need_ilm = need_ilm
        self._cache: dict[tuple[int, ...], dict] = {}

    def node(self, prefix: tuple[int, ...]) -> dict:
        hit = self._cache.get(prefix)
        if hit is not None:
            return hit
        m = self.model
        if not prefix:
            out, state = m.predictor_start()
            elm_state = None
            elm_token = 0
        else:
            parent = self.node(prefix[:-1])
            out, state = m.predictor_step(prefix[-1], parent["state"])
            elm_state = parent.get("elm_state")
            elm_token = prefix[-1]
        p = m.pred_proj(out)
        node = {"p": p, "state": state}
        if self.need_ilm:
            ilm = m.joint_from_proj(m.enc_proj(Tensor(np.zeros(m.cfg.model_dim))), p).data
            node["ilm"] = _log_softmax(ilm[1:])
        if self.elm is not None:
            # distribution over the label after this prefix, and the state children resume from
            node["elm"], node["elm_state"] = self.elm.step(elm_token, elm_state)
        self._cache[prefix] = node
        return node

    def am_log_probs(self, e_t: Tensor, prefix: tuple[int, ...]) -> np.ndarray:
        return _log_softmax(self.model.joint_from_proj(e_t, self.node(prefix)["p"]).data)


def _enc_proj(model: UstrModel, audio) -> Tensor:
    enc = model.encode_speech(audio)
    return model.enc_proj(enc.values)


def greedy_decode(model: UstrModel, audio, max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME) -> list[int]:
    """Frame-by-frame argmax; blank advances, a label updates the predictor."""
    with no_grad():
        e = _enc_proj(model, audio)
        out, state = model.predictor_start()
        p = model.pred_proj(out)
        tokens: list[int] = []
        for t in range(e.shape[0]):
            e_t = e[t]
            for _ in range(max_symbols_per_frame):
                k = int(np.argmax(model.joint_from_proj(e_t, p).data))
                if k == 0:
                    break
                tokens.append(k)
                out, state = model.predictor_step(k, state)
                p = model.pred_proj(out)
    return tokens


def rescore_am(model: UstrModel, audio, tokens) -> float:
    """Exact log P(tokens | audio) summed over all alignments."""
    labels = np.asarray(tokens, dtype=np.int64)
    with no_grad():
        enc = model.encode_speech(audio)
        loss, _ = transducer_loss(model.join(enc, model.predict(labels)), labels)
    return -loss.item()


def _merge(pool: dict, prefix, am, ilm, elm) -> None:
    old = pool.get(prefix)
    if old is None:
        pool[prefix] = [am, ilm, elm]
    else:
        old[0] = float(np.logaddexp(old[0], am))


def beam_search(
    model: UstrModel,
    audio,
    cfg: FusionConfig = FusionConfig(),
    elm: ExternalLm | None = None,
    max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME,
    rescore: bool = True,
) -> list[Hypothesis]:
    """Frame-synchronous beam search with prefix merging, ranked by fused score.

    Within a frame, hypotheses are expanded up to ``max_symbols_per_frame``
    times; blank expansions move a hypothesis to the next frame. Identical
    prefixes are merged by summing transducer probability. The label total is
    capped at twice the number of encoder frames. With ``rescore`` the final
    score_am of each returned hypothesis is the exact lattice log-probability.
    """
    if cfg.lambda_elm > 0 and elm is None:
        raise DecodeError("lambda_elm > 0 needs an external LM")
    use_elm = elm if cfg.lambda_elm > 0 else None
    with no_grad():
        e = _enc_proj(model, audio)
        T = e.shape[0]
        max_total = 2 * T
        scorer = _Scorer(model, use_elm, cfg.lambda_ilm > 0)
        lam_i, lam_e = cfg.lambda_ilm, cfg.lambda_elm

        def fused(v):
            return v[0] + lam_e * v[2] - lam_i * v[1]

        beams: dict[tuple[int, ...], list[float]] = {(): [0.0, 0.0, 0.0]}
        for t in range(T):
            e_t = e[t]
            finished: dict = {}
            active = beams
            for it in range(max_symbols_per_frame + 1):
                expanded: dict = {}
                for prefix, (am, ilm, el) in active.items():
                    lp = scorer.am_log_probs(e_t, prefix)
                    _merge(finished, prefix, am + lp[0], ilm, el)
                    if it == max_symbols_per_frame or len(prefix) >= max_total:
                        continue
                    node = scorer.node(prefix)
                    inc = lp[1:].copy()
                    if lam_i:
                        inc -= lam_i * node["ilm"]
                    if use_elm is not None:
                        inc += lam_e * node["elm"]
                    k_top = np.argsort(-inc, kind="stable")[: cfg.beam]
                    for j in k_top:
                        k = int(j) + 1
                        _merge(
                            expanded,
                            prefix + (k,),
                            am + lp[k],
                            ilm + (node["ilm"][j] if lam_i else 0.0),
                            el + (node["elm"][j] if use_elm is not None else 0.0),
                        )
                # joint pruning: finished (blank) entries win ties over label expansions
                ranked = sorted(
                    [(fused(v), 0, p) for p, v in finished.items()] + [(fused(v), 1, p) for p, v in expanded.items()],
                    key=lambda r: (-r[0], r[1], r[2]),
                )[: cfg.beam]
                keep_f = {p for _, kind, p in ranked if kind == 0}
                keep_a = {p for _, kind, p in ranked if kind == 1}
                finished = {p: v for p, v in finished.items() if p in keep_f}
                active = {p: v for p, v in expanded.items() if p in keep_a}
                if not active:
                    break
            beams = finished

    hyps = [Hypothesis(p, v[0], v[1], v[2]) for p, v in beams.items()]
    if rescore:
        for h in hyps:
            h.score_am = rescore_am(model, audio, h.tokens)
    hyps.sort(key=lambda h: (-fused_score(h, cfg), h.tokens))
    return hyps


@dataclass
class DecodeResult:
    id: str
    tokens: tuple[int, ...]
    score_am: float
    score_ilm: float
    score_elm: float

    def to_json(self, words: list[str] | None = None) -> dict:
        out = {"id": self.id, "tokens": list(self.tokens)}
        if words is not None:
            out["text"] = " ".join(words)
        out.update(score_am=self.score_am, score_ilm=self.score_ilm, score_elm=self.score_elm)
        return out


def decode_one(model, audio, cfg: FusionConfig, elm: ExternalLm | None = None) -> Hypothesis:
    """Greedy decoding for beam 1 without fusion, beam search otherwise."""
    if cfg.beam == 1 and cfg.lambda_ilm == 0 and cfg.lambda_elm == 0:
        tokens = tuple(greedy_decode(model, audio))
        return Hypothesis(tokens, rescore_am(model, audio, tokens))
    return beam_search(model, audio, cfg, elm)[0]


def batch_decode(model: UstrModel, manifest, cfg: FusionConfig, elm: ExternalLm | None = None) -> dict[str, DecodeResult]:
    """Decode every utterance of a manifest; results keyed by utterance id."""
    missing = [r.id for r in manifest.records if r.audio is None]
    if missing:
        raise DecodeError(f"utterances without audio: {', '.join(missing)}")
    results = {}
    for rec in manifest.records:
        h = decode_one(model, manifest.load_audio(rec), cfg, elm)
        results[rec.id] = DecodeResult(rec.id, h.tokens, h.score_am, h.score_ilm, h.score_elm)
    return results


def write_decodes(results: dict[str, DecodeResult], path, words_fn=None) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for uid in sorted(results):
            r = results[uid]
            words = words_fn(r.tokens) if words_fn else None
            fh.write(json.dumps(r.to_json(words), sort_keys=True) + "\n")
