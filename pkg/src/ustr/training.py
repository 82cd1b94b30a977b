"""Batching, augmentation and the three training recipes.

* ``train_base``: paired data only; each utterance goes through the text
  path with probability ``swap_prob``.
* ``adapt_multistep``: continue from a base model with the audio and shared
  encoders frozen, mixing paired source data and target text 1:1.
* ``train_singlestep``: the same 1:1 mixture from random initialisation.

``train_external_lm`` fits the GRU language model used for fusion.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import Manifest
from .loss import LossConfig, LossError, ilmt_loss, total_loss, transducer_loss
from .model import AUDIO_PREFIX, SHARED_PREFIX, TEXT_PREFIX, ExternalLm, LmConfig, UstrConfig, UstrModel
from .nn import AdamConfig, AdamState, adam_step, global_norm, warmup_lr
from .nn import tensor as F
from .textfeat import (
    BpeModel,
    TextFeaturizer,
    TextRepConfig,
    bpe_encode,
    detokenize,
    mask_then_repeat,
    output_vocab,
    repeat_then_mask,
)

log = logging.getLogger(__name__)

STAGES = ("base", "adapt_multistep", "singlestep")
MULTISTEP_FROZEN = (AUDIO_PREFIX, SHARED_PREFIX)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# text resources and prepared samples
# ---------------------------------------------------------------------------


class TextResources:
    """Output-label tokenizer (BPE) plus the text-encoder featurizer."""

    def __init__(self, bpe: BpeModel, featurizer: TextFeaturizer):
        self.bpe = bpe
        self.out_vocab = output_vocab(bpe)
        self.featurizer = featurizer

    @property
    def num_labels(self) -> int:
        return len(self.out_vocab)

    def labels(self, transcript) -> np.ndarray:
        """Transducer labels: output-vocabulary ids shifted by one (0 is blank)."""
        return bpe_encode(self.bpe, transcript, self.out_vocab).array() + 1

    def words(self, labels) -> list[str]:
        return detokenize([self.out_vocab.symbol(int(i) - 1) for i in labels])

    def text_tokens(self, transcript) -> np.ndarray:
        return self.featurizer(transcript).array()


@dataclass
class Sample:
    id: str
    transcript: tuple[str, ...]
    labels: np.ndarray
    text_tokens: np.ndarray | None
    audio: np.ndarray | None


def prepare_samples(manifest: Manifest, res: TextResources, with_audio: bool = True) -> list[Sample]:
    out = []
    for rec in manifest.records:
        audio = manifest.load_audio(rec) if with_audio and rec.audio is not None else None
        try:
            tokens = res.text_tokens(rec.transcript)
        except KeyError:
            tokens = None
        out.append(Sample(rec.id, rec.transcript, res.labels(rec.transcript), tokens, audio))
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    max_time_width: int = 4
    max_freq_width: int = 2


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    swap_prob: float = 0.15
    ratio: tuple[int, int] = (1, 1)
    ilmt_weight: float = 0.2
    ilmt_enabled: bool | None = None  # None: off for base training, on for the adaptation stages
    text_rep: TextRepConfig = field(default_factory=TextRepConfig)
    mask_order: str = "mask_then_repeat"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    eval_every: int = 0
    log_every: int = 50
    freeze_text_encoder: bool = False  # multistep only: also hold the text encoder fixed

    def __post_init__(self):
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ValueError("swap_prob must lie in [0, 1]")
        if len(self.ratio) != 2 or min(self.ratio) < 1 or any(int(r) != r for r in self.ratio):
            raise ValueError("ratio parts must be positive integers")
        if self.mask_order not in ("mask_then_repeat", "repeat_then_mask"):
            raise ValueError(f"unknown mask_order {self.mask_order!r}")

    def loss_for(self, stage: str) -> LossConfig:
        enabled = self.ilmt_enabled if self.ilmt_enabled is not None else stage != "base"
        return LossConfig(self.ilmt_weight, enabled)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "text_rep" in obj:
            obj["text_rep"] = TextRepConfig(**obj["text_rep"])
        if "augment" in obj:
            obj["augment"] = AugmentConfig(**obj["augment"])
        if "optimizer" in obj:
            obj["optimizer"] = AdamConfig(**obj["optimizer"])
        if "ratio" in obj:
            obj["ratio"] = tuple(obj["ratio"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class BatchItem:
    modality: str  # "speech" or "text"
    labels: np.ndarray
    audio: np.ndarray | None = None
    text: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.modality == "speech" and (self.audio is None or self.text is not None):
            raise ValueError("speech items carry audio only")
        if self.modality == "text" and (self.text is None or self.audio is not None):
            raise ValueError("text items carry text ids only")
        if self.modality not in ("speech", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")


class EpochStream:
    """Endless index stream; a fresh seeded permutation per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise TrainingError("cannot draw batches from an empty corpus")
        self.n = n
        self.rng = rng
        self.epoch = 0
        self._order = rng.permutation(n)
        self._pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self._pos == self.n:
                self.epoch += 1
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out


def _text_features(tokens: np.ndarray, cfg: TrainConfig, rng) -> np.ndarray:
    fn = mask_then_repeat if cfg.mask_order == "mask_then_repeat" else repeat_then_mask
    return fn(tokens, cfg.text_rep, rng).ids


def spec_augment(audio: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero one random time band and one random frequency band."""
    T, D = audio.shape
    out = audio.copy()
    wt = int(rng.integers(0, min(cfg.max_time_width, T - 1) + 1)) if cfg.max_time_width > 0 else 0
    wf = int(rng.integers(0, min(cfg.max_freq_width, D - 1) + 1)) if cfg.max_freq_width > 0 else 0
    if wt:
        t0 = int(rng.integers(0, T - wt + 1))
        out[t0 : t0 + wt] = 0.0
    if wf:
        f0 = int(rng.integers(0, D - wf + 1))
        out[:, f0 : f0 + wf] = 0.0
    return out


def _paired_item(s: Sample, swap_prob: float, cfg: TrainConfig, rng) -> BatchItem:
    if s.audio is None:
        raise TrainingError(f"paired sample {s.id!r} has no audio")
    if s.text_tokens is not None and rng.random() < swap_prob:
        return BatchItem("text", s.labels, text=_text_features(s.text_tokens, cfg, rng), id=s.id)
    audio = spec_augment(s.audio, cfg.augment, rng) if cfg.augment.enabled else s.audio
    return BatchItem("speech", s.labels, audio=audio, id=s.id)


def make_base_batch(
    samples: list[Sample], indices, swap_prob: float, rng: np.random.Generator, cfg: TrainConfig
) -> list[BatchItem]:
    """Each paired sample independently becomes a text item with probability ``swap_prob``."""
    return [_paired_item(samples[i], swap_prob, cfg, rng) for i in indices]


def split_counts(batch_size: int, ratio: tuple[int, int]) -> tuple[int, int]:
    a, b = ratio
    n_paired = int(round(batch_size * a / (a + b)))
    return n_paired, batch_size - n_paired


def make_adapt_batch(
    paired: list[Sample],
    text_only: list[Sample],
    paired_idx,
    text_idx,
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> list[BatchItem]:
    """Paired source items (p-swapped as in base training) followed by target text items."""
    if not paired or not text_only:
        raise TrainingError("adaptation needs both paired and text-only data")
    items = [_paired_item(paired[i], cfg.swap_prob, cfg, rng) for i in paired_idx]
    for i in text_idx:
        s = text_only[i]
        if s.text_tokens is None:
            raise TrainingError(f"text-only sample {s.id!r} cannot be featurized")
        items.append(BatchItem("text", s.labels, text=_text_features(s.text_tokens, cfg, rng), id=s.id))
    return items


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    loss: float
    rnnt: float
    ilmt: float
    grad_norm: float
    lr: float
    n_speech: int
    n_text: int


def item_losses(model: UstrModel, item: BatchItem, loss_cfg: LossConfig):
    """(total, rnnt, ilmt) tensors for one batch item, routed by modality."""
    enc = model.encode_speech(item.audio) if item.modality == "speech" else model.encode_text(item.text)
    pred = model.predict(item.labels)
    rnnt, _ = transducer_loss(model.join(enc, pred), item.labels)
    if loss_cfg.ilmt_enabled:
        ilmt = ilmt_loss(model.ilm_logits(pred), item.labels)
        return total_loss(rnnt, ilmt, loss_cfg), rnnt, ilmt
    return rnnt, rnnt, None


def compute_gradients(model: UstrModel, batch: list[BatchItem], loss_cfg: LossConfig):
    """Backward pass of the batch-mean loss; returns (grads, loss, rnnt, ilmt)."""
    if not batch:
        raise TrainingError("empty batch")
    ps = model.params
    ps.zero_grad()
    totals, rnnt_sum, ilmt_sum = [], 0.0, 0.0
    for item in batch:
        try:
            tot, rnnt, ilmt = item_losses(model, item, loss_cfg)
        except LossError as exc:
            raise TrainingError(f"loss failed on item {item.id!r} ({item.modality}): {exc}") from exc
        if not math.isfinite(tot.item()):
            raise TrainingError(f"non-finite loss {tot.item()} on item {item.id!r} ({item.modality})")
        totals.append(tot)
        rnnt_sum += rnnt.item()
        ilmt_sum += 0.0 if ilmt is None else ilmt.item()
    n = len(batch)
    mean = F.reduce_sum(F.stack(totals)) * (1.0 / n)
    mean.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in ps.items()}
    return grads, mean.item(), rnnt_sum / n, ilmt_sum / n


def train_step(
    model: UstrModel,
    batch: list[BatchItem],
    loss_cfg: LossConfig,
    state: AdamState,
    lr: float | None = None,
) -> StepMetrics:
    grads, loss, rnnt, ilmt = compute_gradients(model, batch, loss_cfg)
    trainable = {n: grads[n] for n in model.params.trainable_names()}
    norm = global_norm(trainable)
    clip = state.config.clip_norm
    if clip and norm > clip:
        trainable = {n: g * (clip / norm) for n, g in trainable.items()}
    lr = state.config.lr if lr is None else lr
    adam_step(model.params, state, trainable, lr=lr)
    model.params.zero_grad()
    n_text = sum(1 for it in batch if it.modality == "text")
    return StepMetrics(state.step, loss, rnnt, ilmt, norm, lr, len(batch) - n_text, n_text)


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: UstrModel
    history: list[StepMetrics]
    evals: list[dict] = field(default_factory=list)
    seconds: float = 0.0


EvalFn = Callable[[UstrModel], dict]


class MetricsWriter:
    """Append-only CSV: step, losses, grad norm, then any eval columns."""

    FIELDS = ["stage", "step", "loss", "rnnt", "ilmt", "grad_norm", "lr", "n_speech", "n_text"]

    def __init__(self, path, stage: str):
        self.path = Path(path) if path else None
        self.stage = stage
        self._eval_keys: list[str] | None = None

    def write(self, m: StepMetrics, evals: dict | None = None) -> None:
        if self.path is None:
            return
        evals = evals or {}
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.FIELDS + ["eval"])
            row = [self.stage, m.step, f"{m.loss:.6f}", f"{m.rnnt:.6f}", f"{m.ilmt:.6f}", f"{m.grad_norm:.6f}"]
            row += [f"{m.lr:.3e}", m.n_speech, m.n_text]
            row.append(";".join(f"{k}={v:.4f}" for k, v in sorted(evals.items())))
            w.writerow(row)


def _run(
    model: UstrModel,
    cfg: TrainConfig,
    next_batch: Callable[[], list[BatchItem]],
    stage: str,
    eval_fn: EvalFn | None,
    metrics_path,
) -> TrainResult:
    state = AdamState(config=cfg.optimizer)
    loss_cfg = cfg.loss_for(stage)
    writer = MetricsWriter(metrics_path, stage)
    history: list[StepMetrics] = []
    evals: list[dict] = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        lr = warmup_lr(cfg.optimizer, step, cfg.steps)
        try:
            m = train_step(model, next_batch(), loss_cfg, state, lr=lr)
        except TrainingError as exc:
            raise TrainingError(f"{stage} step {step}: {exc}") from exc
        history.append(m)
        ev = None
        if eval_fn is not None and cfg.eval_every and step % cfg.eval_every == 0:
            ev = eval_fn(model)
            evals.append({"step": step, **ev})
        if step % max(1, cfg.log_every) == 0 or ev is not None or step == cfg.steps:
            writer.write(m, ev)
            log.info(
                "%s step %d loss %.4f (%d text items) gnorm %.2f%s",
                stage, step, m.loss, m.n_text, m.grad_norm, f" eval {ev}" if ev else "",
            )
    return TrainResult(model, history, evals, time.perf_counter() - t0)


def _rng(cfg: TrainConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, STAGES.index(stage)])


def train_base(
    model: UstrModel,
    paired: list[Sample],
    cfg: TrainConfig,
    eval_fn: EvalFn | None = None,
    metrics_path=None,
) -> TrainResult:
    """Train on paired data, routing each item through the text path with probability ``swap_prob``."""
    rng = _rng(cfg, "base")
    stream = EpochStream(len(paired), np.random.default_rng([cfg.seed, 10]))
    model.params.unfreeze_all()

    def next_batch():
        return make_base_batch(paired, stream.take(cfg.batch_size), cfg.swap_prob, rng, cfg)

    return _run(model, cfg, next_batch, "base", eval_fn, metrics_path)


def _adapt_batches(paired, text_only, cfg: TrainConfig, rng, seed_offset: int):
    n_paired, n_text = split_counts(cfg.batch_size, cfg.ratio)
    ps = EpochStream(len(paired), np.random.default_rng([cfg.seed, seed_offset]))
    ts = EpochStream(len(text_only), np.random.default_rng([cfg.seed, seed_offset + 1]))

    def next_batch():
        return make_adapt_batch(paired, text_only, ps.take(n_paired), ts.take(n_text), rng, cfg)

    return next_batch


def adapt_multistep(
    model: UstrModel,
    paired: list[Sample],
    text_only: list[Sample],
    cfg: TrainConfig,
    eval_fn: EvalFn | None = None,
    metrics_path=None,
) -> TrainResult:
    """Second step: audio and shared encoders frozen; predictor, jointer and text encoder train.

    With ``cfg.freeze_text_encoder`` the text encoder is held fixed as well,
    so text-only batches cannot move the text embedding away from where the
    shared encoder learned to read it.
    """
    if not model.has_text_encoder:
        raise TrainingError("multi-step adaptation needs a model with its text encoder")
    model.params.unfreeze_all()
    model.params.freeze(MULTISTEP_FROZEN + ((TEXT_PREFIX,) if cfg.freeze_text_encoder else ()))
    frozen_before = {n: model.params[n].data.copy() for n in model.params.frozen_names()}
    rng = _rng(cfg, "adapt_multistep")
    result = _run(model, cfg, _adapt_batches(paired, text_only, cfg, rng, 20), "adapt_multistep", eval_fn, metrics_path)
    for n, before in frozen_before.items():
        if not np.array_equal(before, model.params[n].data):
            raise TrainingError(f"frozen parameter {n!r} changed during adaptation")
    model.params.unfreeze_all()
    return result


def train_singlestep(
    model_cfg: UstrConfig,
    paired: list[Sample],
    text_only: list[Sample],
    cfg: TrainConfig,
    init_seed: int = 0,
    eval_fn: EvalFn | None = None,
    metrics_path=None,
) -> TrainResult:
    """Random initialisation, then the 1:1 paired/text mixture from the first step; nothing frozen."""
    model = UstrModel.init(model_cfg, init_seed)
    rng = _rng(cfg, "singlestep")
    return _run(model, cfg, _adapt_batches(paired, text_only, cfg, rng, 30), "singlestep", eval_fn, metrics_path)


# ---------------------------------------------------------------------------
# external LM
# ---------------------------------------------------------------------------


@dataclass
class LmTrainConfig:
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    optimizer: AdamConfig = field(default_factory=lambda: AdamConfig(lr=3e-3, warmup_frac=0.0))


def lm_nll(lm: ExternalLm, labels: np.ndarray):
    """Summed next-label negative log-likelihood of y_1..y_U (tensor)."""
    lp = lm.score(labels)
    U = len(labels)
    return -F.reduce_sum(lp[np.arange(U), np.asarray(labels) - 1])


def perplexity(lm: ExternalLm, sequences) -> float:
    from .nn import no_grad

    nll, count = 0.0, 0
    with no_grad():
        for labels in sequences:
            nll += lm_nll(lm, labels).item()
            count += len(labels)
    return math.exp(nll / max(count, 1))


def train_external_lm(
    sequences: list[np.ndarray],
    lm_cfg: LmConfig,
    cfg: LmTrainConfig,
    heldout: list[np.ndarray] | None = None,
) -> tuple[ExternalLm, list[dict]]:
    """Next-label cross-entropy training; logs train (and held-out) perplexity per epoch."""
    sequences = [np.asarray(s) for s in sequences if len(s)]
    if not sequences:
        raise TrainingError("external LM needs a non-empty text corpus")
    lm = ExternalLm.init(lm_cfg, cfg.seed)
    state = AdamState(config=cfg.optimizer)
    stream_rng = np.random.default_rng([cfg.seed, 40])
    history = [{"epoch": 0, "train_ppl": perplexity(lm, sequences)}]
    if heldout:
        history[0]["heldout_ppl"] = perplexity(lm, heldout)
    for epoch in range(1, cfg.epochs + 1):
        order = stream_rng.permutation(len(sequences))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            lm.params.zero_grad()
            tokens = sum(len(sequences[i]) for i in idx)
            loss = F.reduce_sum(F.stack([lm_nll(lm, sequences[i]) for i in idx])) * (1.0 / tokens)
            loss.backward()
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in lm.params.items()}
            adam_step(lm.params, state, grads)
        rec = {"epoch": epoch, "train_ppl": perplexity(lm, sequences)}
        if heldout:
            rec["heldout_ppl"] = perplexity(lm, heldout)
        history.append(rec)
        log.info("elm epoch %d %s", epoch, rec)
    lm.params.zero_grad()
    return lm, history


__all__ = [
    "AugmentConfig",
    "BatchItem",
    "EpochStream",
    "LmTrainConfig",
    "MULTISTEP_FROZEN",
    "Sample",
    "TextResources",
    "TrainConfig",
    "TrainResult",
    "adapt_multistep",
    "compute_gradients",
    "make_adapt_batch",
    "make_base_batch",
    "prepare_samples",
    "spec_augment",
    "split_counts",
    "train_base",
    "train_external_lm",
    "train_singlestep",
    "train_step",
]
