"""The USTR transducer: audio/text front-ends, shared encoder, predictor, jointer.

Speech path: audio -> audio_encoder -> shared_encoder -> jointer.
Text path:   text ids -> text_encoder -> shared_encoder -> jointer.
Both front-ends emit ``model_dim`` vectors so the shared encoder sees one
space. Only the speech path is needed at inference, so checkpoints can be
saved without ``text_encoder.*``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import ParamSet, Tensor
from .nn import layers as L
from .nn import tensor as F

CHECKPOINT_MAGIC = b"USTRCKPT"
CHECKPOINT_VERSION = 1

AUDIO_PREFIX = "audio_encoder."
TEXT_PREFIX = "text_encoder."
SHARED_PREFIX = "shared_encoder."
PREDICTOR_PREFIX = "predictor."
JOINT_PREFIX = "joint."


class CheckpointError(Exception):
    pass


class TextEncoderAbsent(RuntimeError):
    """Raised when the text path is used on a checkpoint saved without it."""


@dataclass
class UstrConfig:
    feature_dim: int = 16
    model_dim: int = 64
    shared_blocks: int = 2
    num_heads: int = 2
    subsampling: int = 2
    conv_channels: int = 8
    conv_kernel: int = 7
    ff_mult: int = 4
    text_unit: str = "phoneme"
    text_vocab_size: int = 25
    output_vocab_size: int = 100  # labels, blank excluded
    predictor_layers: int = 1
    predictor_dim: int = 64
    joint_dim: int = 64
    cell: str = "gru"
    blank_id: int = 0

    def __post_init__(self):
        if self.blank_id != 0:
            raise ValueError("blank id must be 0")
        if self.subsampling not in (2, 4):
            raise ValueError("subsampling must be 2 or 4")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.cell != "gru":
            raise ValueError(f"unsupported recurrent cell {self.cell!r}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if min(self.feature_dim, self.output_vocab_size, self.text_vocab_size, self.predictor_layers) < 1:
            raise ValueError("dimensions and vocabulary sizes must be positive")

    @property
    def num_classes(self) -> int:
        return self.output_vocab_size + 1

    @property
    def conv_strides(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return ((2, 2), (2, 2) if self.subsampling == 4 else (1, 1))

    @property
    def audio_proj_in(self) -> int:
        w = self.feature_dim
        for _, sf in self.conv_strides:
            w = -(-w // sf)
        return self.conv_channels * w

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "UstrConfig":
        return cls(**obj)


def expected_param_count(cfg: UstrConfig) -> int:
    """Closed-form number of scalar parameters implied by ``cfg``."""
    d, C, k = cfg.model_dim, cfg.conv_channels, 3
    ln = 2 * d
    att = 4 * (d * d + d)
    ff = (d * d * cfg.ff_mult + d * cfg.ff_mult) + (d * cfg.ff_mult * d + d)
    audio = (C * 1 * k * k + C) + (C * C * k * k + C) + (cfg.audio_proj_in * d + d)
    text = cfg.text_vocab_size * d + (2 * ln + att + ff)
    conformer = 3 * ln + att + (cfg.conv_kernel * d + d) + (d * d + d) + ff
    shared = cfg.shared_blocks * conformer
    P, V1, J = cfg.predictor_dim, cfg.num_classes, cfg.joint_dim
    pred = V1 * P + cfg.predictor_layers * (P * 3 * P + P * 3 * P + 6 * P)
    joint = (d * J + J) + P * J + (J * V1 + V1)
    return audio + text + shared + pred + joint


@dataclass
class EncoderOutput:
    values: Tensor  # (frames, model_dim)
    modality: str

    def __len__(self) -> int:
        return self.values.shape[0]


class UstrModel:
    def __init__(self, cfg: UstrConfig, params: ParamSet):
        self.cfg = cfg
        self.params = params

    # -- construction ----------------------------------------------------
    @classmethod
    def init(cls, cfg: UstrConfig, seed: int = 0) -> "UstrModel":
        rng = np.random.default_rng(seed)
        ps = ParamSet()
        d = cfg.model_dim
        C = cfg.conv_channels
        ps.add("audio_encoder.conv0.weight", L._uniform(rng, (C, 1, 3, 3), 9))
        ps.add("audio_encoder.conv0.bias", np.zeros(C))
        ps.add("audio_encoder.conv1.weight", L._uniform(rng, (C, C, 3, 3), 9 * C))
        ps.add("audio_encoder.conv1.bias", np.zeros(C))
        L.init_linear(ps, "audio_encoder.proj", cfg.audio_proj_in, d, rng)

        ps.add("text_encoder.embedding", rng.uniform(-0.5, 0.5, size=(cfg.text_vocab_size, d)))
        L.init_transformer_block(ps, "text_encoder.block", d, cfg.ff_mult, rng)

        for i in range(cfg.shared_blocks):
            L.init_conformer_block(ps, f"shared_encoder.blocks.{i}", d, cfg.conv_kernel, cfg.ff_mult, rng)

        P = cfg.predictor_dim
        ps.add("predictor.embedding", rng.uniform(-0.5, 0.5, size=(cfg.num_classes, P)))
        for layer in range(cfg.predictor_layers):
            L.init_gru(ps, f"predictor.gru{layer}", P, P, rng)

        L.init_linear(ps, "joint.enc_proj", d, cfg.joint_dim, rng)
        L.init_linear(ps, "joint.pred_proj", P, cfg.joint_dim, rng, bias=False)
        L.init_linear(ps, "joint.out", cfg.joint_dim, cfg.num_classes, rng)
        return cls(cfg, ps)

    @property
    def has_text_encoder(self) -> bool:
        return self.params.has_prefix(TEXT_PREFIX)

    def stripped(self) -> "UstrModel":
        """Same parameters (shared tensors) without the text encoder."""
        return UstrModel(self.cfg, self.params.subset([TEXT_PREFIX]))

    # -- encoders --------------------------------------------------------
    def audio_encode(self, audio) -> EncoderOutput:
        ps, cfg = self.params, self.cfg
        x = F.as_tensor(audio)
        if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
            raise ValueError(f"audio must be T x {cfg.feature_dim}, got {x.shape}")
        if x.shape[0] < cfg.subsampling:
            raise ValueError(f"audio has {x.shape[0]} frames, fewer than subsampling factor {cfg.subsampling}")
        h = F.reshape(x, (1, *x.shape))
        for i, stride in enumerate(cfg.conv_strides):
            h = F.conv2d(h, ps[f"audio_encoder.conv{i}.weight"], ps[f"audio_encoder.conv{i}.bias"], stride, (1, 1))
            h = F.relu(h)
        C, Tp, W = h.shape
        h = F.reshape(F.transpose(h, (1, 0, 2)), (Tp, C * W))
        return EncoderOutput(L.linear(ps, "audio_encoder.proj", h), "speech")

    def text_encode(self, ids) -> EncoderOutput:
        if not self.has_text_encoder:
            raise TextEncoderAbsent("text encoder absent: checkpoint was saved with strip_text_encoder")
        ids = np.asarray(getattr(ids, "ids", ids), dtype=np.int64)
        h = F.embedding(self.params["text_encoder.embedding"], ids)
        h = L.transformer_block(self.params, "text_encoder.block", h, self.cfg.num_heads)
        return EncoderOutput(h, "text")

    def shared_encode(self, x: EncoderOutput) -> EncoderOutput:
        h = x.values
        if h.ndim != 2 or h.shape[1] != self.cfg.model_dim:
            raise ValueError(f"shared encoder expects (frames, {self.cfg.model_dim}), got {h.shape}")
        for i in range(self.cfg.shared_blocks):
            h = L.conformer_block(self.params, f"shared_encoder.blocks.{i}", h, self.cfg.num_heads)
        return EncoderOutput(h, x.modality)

    def encode_speech(self, audio) -> EncoderOutput:
        return self.shared_encode(self.audio_encode(audio))

    def encode_text(self, ids) -> EncoderOutput:
        return self.shared_encode(self.text_encode(ids))

    # -- predictor / jointer --------------------------------------------
    def predict(self, labels) -> Tensor:
        """(U+1, predictor_dim) states; row u has consumed the start symbol and y_1..y_u."""
        labels = np.asarray(getattr(labels, "ids", labels), dtype=np.int64)
        if labels.size and (labels.min() < 1 or labels.max() > self.cfg.output_vocab_size):
            raise ValueError("predictor labels must lie in [1, V]; blank (0) is not a label")
        ids = np.concatenate([[self.cfg.blank_id], labels])
        h = F.embedding(self.params["predictor.embedding"], ids)
        for layer in range(self.cfg.predictor_layers):
            h = L.gru_sequence(self.params, f"predictor.gru{layer}", h)
        return h

    def predictor_start(self) -> tuple[Tensor, list[Tensor]]:
        return self.predictor_step(self.cfg.blank_id, None)

    def predictor_step(self, token: int, state: list[Tensor] | None) -> tuple[Tensor, list[Tensor]]:
        """Consume one token; returns (output, new per-layer state)."""
        P = self.cfg.predictor_dim
        if state is None:
            state = [Tensor(np.zeros(P)) for _ in range(self.cfg.predictor_layers)]
        x = self.params["predictor.embedding"][int(token)]
        new = []
        for layer in range(self.cfg.predictor_layers):
            x = L.gru_step(self.params, f"predictor.gru{layer}", x, state[layer])
            new.append(x)
        return x, new

    def enc_proj(self, enc: Tensor) -> Tensor:
        return L.linear(self.params, "joint.enc_proj", enc)

    def pred_proj(self, pred: Tensor) -> Tensor:
        return L.linear(self.params, "joint.pred_proj", pred)

    def joint_from_proj(self, e: Tensor, p: Tensor) -> Tensor:
        """Output logits for already-projected encoder ``e`` (.., J) and predictor ``p`` (.., J)."""
        return L.linear(self.params, "joint.out", F.tanh(e + p))

    def join(self, enc, pred: Tensor) -> Tensor:
        """(frames, U+1, V+1) logits; blank is class 0."""
        enc = enc.values if isinstance(enc, EncoderOutput) else F.as_tensor(enc)
        if enc.shape[-1] != self.cfg.model_dim or pred.shape[-1] != self.cfg.predictor_dim:
            raise ValueError(f"join: encoder {enc.shape} / predictor {pred.shape} dims do not match config")
        T, U1, J = enc.shape[0], pred.shape[0], self.cfg.joint_dim
        e = F.reshape(self.enc_proj(enc), (T, 1, J))
        p = F.reshape(self.pred_proj(pred), (1, U1, J))
        return self.joint_from_proj(e, p)

    def ilm_logits(self, pred: Tensor) -> Tensor:
        """Jointer output with the encoder vector set to zero: (U+1, V+1)."""
        zero = Tensor(np.zeros((1, self.cfg.model_dim)))
        return F.reshape(self.join(zero, pred), (pred.shape[0], self.cfg.num_classes))

    # -- persistence -----------------------------------------------------
    def save(self, path, meta: dict | None = None, strip_text_encoder: bool = False) -> None:
        params = self.params.subset([TEXT_PREFIX]) if strip_text_encoder else self.params
        meta = dict(meta or {})
        meta["text_encoder"] = not strip_text_encoder and self.has_text_encoder
        write_checkpoint(path, "ustr", self.cfg.to_json(), meta, params)

    @classmethod
    def load(cls, path) -> tuple["UstrModel", dict]:
        kind, cfg, meta, params = read_checkpoint(path)
        if kind != "ustr":
            raise CheckpointError(f"{path}: expected a ustr checkpoint, found {kind!r}")
        return cls(UstrConfig.from_json(cfg), params), meta


# ---------------------------------------------------------------------------
# external language model
# ---------------------------------------------------------------------------


@dataclass
class LmConfig:
    vocab_size: int = 100  # labels, blank excluded
    embed_dim: int = 64
    hidden_dim: int = 64

    def to_json(self) -> dict:
        return asdict(self)


class ExternalLm:
    """GRU language model over transducer labels (ids 1..V); id 0 is the start symbol."""

    def __init__(self, cfg: LmConfig, params: ParamSet):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: LmConfig, seed: int = 0) -> "ExternalLm":
        rng = np.random.default_rng(seed)
        ps = ParamSet()
        ps.add("elm.embedding", rng.uniform(-0.5, 0.5, size=(cfg.vocab_size + 1, cfg.embed_dim)))
        L.init_gru(ps, "elm.gru0", cfg.embed_dim, cfg.hidden_dim, rng)
        # small output layer: an untrained model is close to uniform
        L.init_linear(ps, "elm.out", cfg.hidden_dim, cfg.vocab_size, rng, scale=0.05)
        return cls(cfg, ps)

    def logits(self, labels) -> Tensor:
        labels = np.asarray(getattr(labels, "ids", labels), dtype=np.int64)
        ids = np.concatenate([[0], labels])
        h = L.gru_sequence(self.params, "elm.gru0", F.embedding(self.params["elm.embedding"], ids))
        return L.linear(self.params, "elm.out", h)

    def score(self, labels) -> Tensor:
        """(U+1, V) next-label log-probabilities; column j is label j+1."""
        return F.log_softmax(self.logits(labels), axis=-1)

    def step(self, token: int, state: Tensor | None) -> tuple[np.ndarray, Tensor]:
        if state is None:
            state = Tensor(np.zeros(self.cfg.hidden_dim))
        x = self.params["elm.embedding"][int(token)]
        h = L.gru_step(self.params, "elm.gru0", x, state)
        logp = F.log_softmax(L.linear(self.params, "elm.out", h), axis=-1)
        return logp.data, h

    def save(self, path, meta: dict | None = None) -> None:
        write_checkpoint(path, "elm", self.cfg.to_json(), dict(meta or {}), self.params)

    @classmethod
    def load(cls, path) -> tuple["ExternalLm", dict]:
        kind, cfg, meta, params = read_checkpoint(path)
        if kind != "elm":
            raise CheckpointError(f"{path}: expected an elm checkpoint, found {kind!r}")
        return cls(LmConfig(**cfg), params), meta


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
#   magic    8 bytes  b"USTRCKPT"
#   version  u32
#   header   u32 length + UTF-8 JSON {"kind", "config", "meta"}
#   count    u32
#   count x  { u16 name length, name, u8 trainable, u8 ndim, ndim x u32 dims,
#              prod(dims) x f64 }
# all integers and floats little-endian.


def write_checkpoint(path, kind: str, config: dict, meta: dict, params: ParamSet) -> None:
    header = json.dumps({"kind": kind, "config": config, "meta": meta}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(header)), header]
    chunks.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", int(params.is_trainable(name)), t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[str, dict, dict, ParamSet]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a ustr checkpoint")
    try:
        (version,) = struct.unpack_from("<I", raw, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (hlen,) = struct.unpack_from("<I", raw, 12)
        header = json.loads(raw[16 : 16 + hlen])
        off = 16 + hlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        ps = ParamSet()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode()
            off += nlen
            trainable, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(math.prod(shape))
            if off + 8 * n > len(raw):
                raise CheckpointError(f"{path}: corrupt checkpoint (parameter {name!r} truncated)")
            data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            ps.add(name, data.copy(), bool(trainable))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")
    return header["kind"], header["config"], header["meta"], ps
