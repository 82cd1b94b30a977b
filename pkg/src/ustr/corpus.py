"""Synthetic two-domain ASR corpora.

Phonemes are points in a D-dimensional feature space; a word is a sequence
of phonemes given by a closed lexicon; an utterance's "audio" is each
phoneme's prototype vector held for a random number of frames, plus
Gaussian noise. Two domains share the phoneme inventory but differ in
vocabulary and word-transition statistics.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SENTENCE_START = "<s>"
MANIFEST_VERSION = 1
FEATURE_MAGIC = 0x4655  # b"UF" little-endian
_FEATURE_HEADER = struct.Struct("<HIH")  # magic, T, D -> 8 bytes

ARPABET = (
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG "
    "OW OY P R S SH T TH UH UW V W Y Z ZH"
).split()


class CorpusError(Exception):
    """Malformed manifest, feature file or domain description."""


# ---------------------------------------------------------------------------
# inventory and lexicon
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhonemeInventory:
    phonemes: tuple[str, ...]
    prototypes: np.ndarray  # (num_phonemes, D)

    def __post_init__(self):
        if len(set(self.phonemes)) != len(self.phonemes) or not all(self.phonemes):
            raise CorpusError("phoneme symbols must be unique and non-empty")
        if self.prototypes.shape[0] != len(self.phonemes):
            raise CorpusError("one prototype vector per phoneme required")

    @property
    def dim(self) -> int:
        return int(self.prototypes.shape[1])

    def index(self, phoneme: str) -> int:
        return self.phonemes.index(phoneme)

    def prototype(self, phoneme: str) -> np.ndarray:
        return self.prototypes[self.index(phoneme)]

    def min_distance(self) -> float:
        diff = self.prototypes[:, None, :] - self.prototypes[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        return float(dist[np.triu_indices(len(self.phonemes), 1)].min())

    def __eq__(self, other):
        return (
            isinstance(other, PhonemeInventory)
            and self.phonemes == other.phonemes
            and np.array_equal(self.prototypes, other.prototypes)
        )

    def to_json(self) -> dict:
        return {"phonemes": list(self.phonemes), "prototypes": self.prototypes.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "PhonemeInventory":
        return cls(tuple(obj["phonemes"]), np.asarray(obj["prototypes"], dtype=np.float64))


def build_inventory(
    num_phonemes: int = 24, dim: int = 16, separation: float = 1.0, seed: int = 0, max_rounds: int = 1000
) -> PhonemeInventory:
    """Draw standard-normal prototypes, rejecting any closer than ``separation`` to an earlier one."""
    if num_phonemes < 2 or dim < 2 or not separation > 0:
        raise ValueError("need num_phonemes >= 2, dim >= 2 and separation > 0")
    rng = np.random.default_rng(seed)
    protos: list[np.ndarray] = []
    rounds = 0
    while len(protos) < num_phonemes:
        cand = rng.standard_normal(dim)
        if all(np.linalg.norm(cand - p) >= separation for p in protos):
            protos.append(cand)
            continue
        rounds += 1
        if rounds > max_rounds:
            raise CorpusError(
                f"could not place {num_phonemes} prototypes {separation} apart in {dim} dims "
                f"after {max_rounds} rejections"
            )
    names = ARPABET[:num_phonemes] if num_phonemes <= len(ARPABET) else [f"P{i:03d}" for i in range(num_phonemes)]
    return PhonemeInventory(tuple(names), np.stack(protos))


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, tuple[str, ...]]

    def __getitem__(self, word: str) -> tuple[str, ...]:
        try:
            return self.entries[word]
        except KeyError:
            raise KeyError(f"word {word!r} not in lexicon") from None

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, inventory: PhonemeInventory) -> None:
        known = set(inventory.phonemes)
        for w, pron in self.entries.items():
            if not pron:
                raise CorpusError(f"empty pronunciation for {w!r}")
            bad = [p for p in pron if p not in known]
            if bad:
                raise CorpusError(f"pronunciation of {w!r} uses unknown phoneme {bad[0]!r}")

    def to_json(self) -> dict:
        return {w: list(p) for w, p in self.entries.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "Lexicon":
        return cls({w: tuple(p) for w, p in obj.items()})


def build_lexicon(
    inventory: PhonemeInventory, vocabulary, seed: int = 0, length_range: tuple[int, int] = (2, 6)
) -> Lexicon:
    """Give every word a distinct random pronunciation of 2-6 phonemes."""
    vocabulary = list(dict.fromkeys(vocabulary))
    if not vocabulary:
        raise ValueError("vocabulary must be non-empty")
    lo, hi = length_range
    n = len(inventory.phonemes)
    capacity = sum(n**k for k in range(lo, hi + 1))
    if len(vocabulary) > capacity:
        raise CorpusError(f"{len(vocabulary)} words exceed the {capacity} distinct pronunciations available")
    rng = np.random.default_rng(seed)
    used: set[tuple[str, ...]] = set()
    entries: dict[str, tuple[str, ...]] = {}
    for word in vocabulary:
        while True:
            length = int(rng.integers(lo, hi + 1))
            pron = tuple(inventory.phonemes[i] for i in rng.integers(0, n, size=length))
            if pron not in used:
                break
        used.add(pron)
        entries[word] = pron
    return Lexicon(entries)


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------


@dataclass
class DomainSpec:
    name: str
    vocabulary: list[str]
    bigram_weights: dict[tuple[str, str], float]
    sentence_length_range: tuple[int, int]

    def __post_init__(self):
        if not self.vocabulary:
            raise CorpusError(f"domain {self.name!r}: empty vocabulary")
        lo, hi = self.sentence_length_range
        if lo < 1 or hi < lo:
            raise CorpusError(f"domain {self.name!r}: bad sentence_length_range {self.sentence_length_range}")
        vocab = set(self.vocabulary)
        for (a, b), w in self.bigram_weights.items():
            if a not in vocab and a != SENTENCE_START or b not in vocab:
                raise CorpusError(f"domain {self.name!r}: bigram ({a}, {b}) outside vocabulary")
            if not w > 0:
                raise CorpusError(f"domain {self.name!r}: bigram ({a}, {b}) has non-positive weight")
        index = {w: i for i, w in enumerate(self.vocabulary)}
        n = len(self.vocabulary)
        table = np.zeros((n + 1, n))  # row n is the sentence start
        for (a, b), w in self.bigram_weights.items():
            table[n if a == SENTENCE_START else index[a], index[b]] += w
        sums = table.sum(axis=1, keepdims=True)
        if np.any(sums == 0):
            row = int(np.flatnonzero(sums[:, 0] == 0)[0])
            src = SENTENCE_START if row == n else self.vocabulary[row]
            raise CorpusError(f"domain {self.name!r}: no successor for {src!r}")
        self._transitions = table / sums

    @property
    def transitions(self) -> np.ndarray:
        """Row-stochastic (|V|+1, |V|) matrix; the last row is the start distribution."""
        return self._transitions

    def stationary(self, iters: int = 10_000, tol: float = 1e-14) -> np.ndarray:
        P = self._transitions[:-1]
        pi = np.full(len(self.vocabulary), 1.0 / len(self.vocabulary))
        for _ in range(iters):
            nxt = pi @ P
            if np.abs(nxt - pi).max() < tol:
                return nxt
            pi = nxt
        return pi

    def to_json(self) -> dict:
        """Compact form: the most common weight becomes ``default_weight`` when every pair is present."""
        from collections import Counter

        obj = {
            "name": self.name,
            "vocabulary": self.vocabulary,
            "sentence_length_range": list(self.sentence_length_range),
        }
        weights = self.bigram_weights
        full = len(weights) == (len(self.vocabulary) + 1) * len(self.vocabulary)
        if full:
            default = Counter(weights.values()).most_common(1)[0][0]
            obj["default_weight"] = default
            obj["bigrams"] = [[a, b, w] for (a, b), w in weights.items() if w != default]
        else:
            obj["bigrams"] = [[a, b, w] for (a, b), w in weights.items()]
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "DomainSpec":
        vocab = list(obj["vocabulary"])
        weights: dict[tuple[str, str], float] = {}
        default = float(obj.get("default_weight", 0.0))
        if default > 0:
            for a in [SENTENCE_START, *vocab]:
                for b in vocab:
                    weights[(a, b)] = default
        for a, b, w in obj.get("bigrams", []):
            weights[(a, b)] = float(w)
        return cls(obj["name"], vocab, weights, tuple(obj["sentence_length_range"]))

    @classmethod
    def load(cls, path) -> "DomainSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def sample_sentence(spec: DomainSpec, rng: np.random.Generator) -> list[str]:
    lo, hi = spec.sentence_length_range
    length = int(rng.integers(lo, hi + 1))
    P = spec.transitions
    row = len(spec.vocabulary)
    words = []
    for _ in range(length):
        row = int(rng.choice(P.shape[1], p=P[row]))
        words.append(spec.vocabulary[row])
    return words


def unigram_kl(a: list[list[str]], b: list[list[str]], smoothing: float = 1.0) -> float:
    """KL(a || b) between unigram distributions, add-``smoothing`` over the union vocabulary."""
    from collections import Counter

    ca = Counter(itertools.chain.from_iterable(a))
    cb = Counter(itertools.chain.from_iterable(b))
    vocab = sorted(set(ca) | set(cb))
    pa = np.array([ca[w] + smoothing for w in vocab], dtype=np.float64)
    pb = np.array([cb[w] + smoothing for w in vocab], dtype=np.float64)
    pa /= pa.sum()
    pb /= pb.sum()
    return float(np.sum(pa * np.log(pa / pb)))


def make_domain_pair(
    seed: int = 0,
    vocab_size: int = 50,
    overlap: float = 0.6,
    successors: int = 3,
    emphasis: float = 20.0,
    default_weight: float = 0.2,
    sentence_length_range: tuple[int, int] = (3, 7),
) -> tuple[DomainSpec, DomainSpec]:
    """Two domains sharing ``overlap`` of their vocabulary with disjoint preferred successors."""
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnoprstuvwyz"
    words: set[str] = set()
    n_shared = int(round(overlap * vocab_size))
    n_total = 2 * vocab_size - n_shared
    while len(words) < n_total:
        length = int(rng.integers(3, 7))
        words.add("".join(letters[i] for i in rng.integers(0, len(letters), size=length)))
    pool = sorted(words)
    rng.shuffle(pool)
    shared = pool[:n_shared]
    src_vocab = shared + pool[n_shared:vocab_size]
    tgt_vocab = shared + pool[vocab_size:n_total]

    def bigrams(vocab, taken):
        weights = {}
        for a in [SENTENCE_START, *vocab]:
            for b in vocab:
                weights[(a, b)] = default_weight
            options = [b for b in vocab if (a, b) not in taken]
            for j in rng.choice(len(options), size=min(successors, len(options)), replace=False):
                weights[(a, options[j])] = emphasis
                taken.add((a, options[j]))
        return weights

    taken: set[tuple[str, str]] = set()
    source = DomainSpec("source", src_vocab, bigrams(src_vocab, taken), sentence_length_range)
    target = DomainSpec("target", tgt_vocab, bigrams(tgt_vocab, taken), sentence_length_range)
    return source, target


# ---------------------------------------------------------------------------
# acoustics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AcousticConfig:
    noise_sigma: float = 0.1
    duration_range: tuple[int, int] = (2, 5)


def synthesize_audio(
    words,
    lexicon: Lexicon,
    inventory: PhonemeInventory,
    noise_sigma: float,
    duration_range,
    rng: np.random.Generator,
) -> np.ndarray:
    lo, hi = duration_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad duration_range {duration_range}")
    frames = []
    for word in words:
        for ph in lexicon[word]:
            d = int(rng.integers(lo, hi + 1))
            frames.append(np.repeat(inventory.prototype(ph)[None, :], d, axis=0))
    audio = np.concatenate(frames, axis=0)
    if noise_sigma > 0:
        audio = audio + rng.normal(0.0, noise_sigma, size=audio.shape)
    return audio


# ---------------------------------------------------------------------------
# manifests and feature files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    domain: str
    transcript: tuple[str, ...]
    audio: str | None = None  # feature file path, relative to the manifest directory
    frames: int | None = None


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    feature_dim: int
    version: int = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CorpusError("utterance ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def paired(self) -> bool:
        return bool(self.records) and all(r.audio is not None for r in self.records)

    def audio_path(self, rec: UtteranceRecord) -> Path:
        if rec.audio is None:
            raise CorpusError(f"utterance {rec.id!r} has no audio")
        return (self.root or Path(".")) / rec.audio

    def load_audio(self, rec: UtteranceRecord) -> np.ndarray:
        return read_features(self.audio_path(rec), expect_dim=self.feature_dim, utt_id=rec.id)

    def transcripts(self) -> list[list[str]]:
        return [list(r.transcript) for r in self.records]


def write_features(path, audio: np.ndarray) -> None:
    audio = np.asarray(audio)
    if audio.ndim != 2 or audio.shape[0] < 1:
        raise CorpusError(f"{path}: features must be a non-empty T x D matrix, got {audio.shape}")
    T, D = audio.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, T, D))
            fh.write(audio.astype("<f4").tobytes())
    except OSError as exc:
        raise CorpusError(f"cannot write feature file {path}: {exc}") from exc


def read_features(path, expect_dim: int | None = None, utt_id: str | None = None) -> np.ndarray:
    who = f"utterance {utt_id!r}" if utt_id else str(path)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusError(f"{who}: cannot read feature file {path}: {exc.strerror}") from exc
    if len(raw) < _FEATURE_HEADER.size:
        raise CorpusError(f"{who}: feature file {path} is truncated (no header)")
    magic, T, D = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise CorpusError(f"{who}: feature file {path} has bad magic {magic:#06x}")
    if expect_dim is not None and D != expect_dim:
        raise CorpusError(f"{who}: feature dim {D} does not match manifest dim {expect_dim}")
    body = raw[_FEATURE_HEADER.size :]
    if len(body) != 4 * T * D:
        raise CorpusError(f"{who}: feature file {path} is truncated ({len(body)} bytes for {T}x{D} floats)")
    return np.frombuffer(body, dtype="<f4").reshape(T, D).astype(np.float64)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    header = {"format": "ustr-manifest", "version": manifest.version, "feature_dim": manifest.feature_dim}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for r in manifest.records:
                rec = {"id": r.id, "domain": r.domain, "transcript": " ".join(r.transcript), "audio": r.audio}
                if r.frames is not None:
                    rec["frames"] = r.frames
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise CorpusError(f"cannot write manifest {path}: {exc}") from exc
    manifest.root = path.parent


def load_manifest(path, check_features: bool = True) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read manifest {path}: {exc.strerror}") from exc
    if not lines or not lines[0].strip():
        raise CorpusError(f"{path}: no utterances")
    try:
        header = json.loads(lines[0])
        feature_dim = int(header["feature_dim"])
        version = int(header["version"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorpusError(f"{path}:1: malformed manifest header") from exc
    if header.get("format") != "ustr-manifest":
        raise CorpusError(f"{path}:1: not a ustr manifest")
    if version != MANIFEST_VERSION:
        raise CorpusError(f"{path}:1: unsupported manifest version {version}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            words = tuple(obj["transcript"].split())
            rec = UtteranceRecord(obj["id"], obj["domain"], words, obj.get("audio"), obj.get("frames"))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed record") from exc
        if not words:
            raise CorpusError(f"{path}:{lineno}: empty transcript for {rec.id!r}")
        records.append(rec)
    if not records:
        raise CorpusError(f"{path}: no utterances")
    manifest = Manifest(records, feature_dim, version, root=path.parent)
    if check_features:
        for rec in records:
            if rec.audio is not None:
                _check_feature_file(manifest, rec)
    return manifest


def _check_feature_file(manifest: Manifest, rec: UtteranceRecord) -> None:
    fpath = manifest.audio_path(rec)
    try:
        size = fpath.stat().st_size
        with open(fpath, "rb") as fh:
            head = fh.read(_FEATURE_HEADER.size)
    except OSError:
        raise CorpusError(f"utterance {rec.id!r}: missing feature file {fpath}") from None
    if len(head) < _FEATURE_HEADER.size:
        raise CorpusError(f"utterance {rec.id!r}: feature file {fpath} is truncated (no header)")
    magic, T, D = _FEATURE_HEADER.unpack(head)
    if magic != FEATURE_MAGIC or D != manifest.feature_dim:
        raise CorpusError(f"utterance {rec.id!r}: feature file {fpath} header does not match manifest")
    if size != _FEATURE_HEADER.size + 4 * T * D:
        raise CorpusError(f"utterance {rec.id!r}: feature file {fpath} is truncated")
    if rec.frames is not None and rec.frames != T:
        raise CorpusError(f"utterance {rec.id!r}: manifest says {rec.frames} frames, file has {T}")


def generate_corpus(
    spec: DomainSpec,
    lexicon: Lexicon,
    inventory: PhonemeInventory,
    n_utterances: int,
    paired: bool,
    acoustic: AcousticConfig,
    seed: int,
    out_dir,
    name: str,
) -> Manifest:
    """Sample ``n_utterances`` sentences; with ``paired`` also synthesize and store features.

    Writes ``<out_dir>/<name>.jsonl`` and, for paired corpora, one feature file
    per utterance under ``<out_dir>/<name>/``.
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    out_dir = Path(out_dir)
    feat_dir = out_dir / name
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if paired:
            feat_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    text_rng = np.random.default_rng([seed, 0])
    audio_rng = np.random.default_rng([seed, 1])
    width = max(4, int(math.log10(n_utterances)) + 1)
    records = []
    for i in range(n_utterances):
        words = sample_sentence(spec, text_rng)
        uid = f"{name}-{i:0{width}d}"
        audio_rel, frames = None, None
        if paired:
            audio = synthesize_audio(
                words, lexicon, inventory, acoustic.noise_sigma, acoustic.duration_range, audio_rng
            )
            audio_rel = f"{name}/{uid}.f32"
            write_features(out_dir / audio_rel, audio)
            frames = audio.shape[0]
        records.append(UtteranceRecord(uid, spec.name, tuple(words), audio_rel, frames))
    manifest = Manifest(records, inventory.dim, root=out_dir)
    save_manifest(manifest, out_dir / f"{name}.jsonl")
    return manifest
