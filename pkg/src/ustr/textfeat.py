"""Text representations for the text encoder and the output vocabulary.

Three unit types turn a transcript into token ids: graphemes (characters
plus a word-boundary symbol), BPE subwords, and phonemes from a lexicon.
``mask_then_repeat`` converts those ids into text-encoder input.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Lexicon

WORD_BOUNDARY = "|"
MASK = "<mask>"
UNITS = ("grapheme", "subword", "phoneme")
BPE_HEADER = "#ustr-bpe v1"


class Vocab:
    """Dense id <-> symbol bijection; optionally reserves id 0 for the mask token."""

    def __init__(self, symbols, with_mask: bool = False):
        symbols = list(symbols)
        if with_mask:
            if MASK in symbols:
                symbols.remove(MASK)
            symbols = [MASK, *symbols]
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.symbols: list[str] = symbols
        self._ids = {s: i for i, s in enumerate(symbols)}
        self.mask_id: int | None = 0 if with_mask else None

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols and self.mask_id == other.mask_id

    def id(self, sym: str) -> int:
        try:
            return self._ids[sym]
        except KeyError:
            raise KeyError(f"symbol {sym!r} not in vocabulary") from None

    def ids(self, syms) -> list[int]:
        return [self.id(s) for s in syms]

    def symbol(self, i: int) -> str:
        return self.symbols[i]

    @property
    def size(self) -> int:
        return len(self.symbols)

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        symbols = Path(path).read_text(encoding="utf-8").splitlines()
        vocab = cls(symbols)
        if symbols and symbols[0] == MASK:
            vocab.mask_id = 0
        return vocab


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    vocab: Vocab = field(compare=False, repr=False)

    def __post_init__(self):
        n = len(self.vocab)
        if any(not 0 <= i < n for i in self.ids):
            raise ValueError(f"token id out of range for vocabulary of size {n}")

    def __len__(self) -> int:
        return len(self.ids)

    def symbols(self) -> list[str]:
        return [self.vocab.symbol(i) for i in self.ids]

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


@dataclass(frozen=True)
class TextRepConfig:
    unit: str = "phoneme"
    repeat: int = 4
    mask_prob: float = 0.15
    mask_token_id: int = 0

    def __post_init__(self):
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {self.unit!r}")
        if self.repeat < 1:
            raise ValueError("repeat must be >= 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")


@dataclass(frozen=True)
class TextFeatureSequence:
    ids: np.ndarray
    config: TextRepConfig

    def __len__(self) -> int:
        return int(self.ids.shape[0])


# ---------------------------------------------------------------------------
# graphemes
# ---------------------------------------------------------------------------


def grapheme_symbols(transcripts) -> list[str]:
    chars = sorted({c for words in transcripts for w in words for c in w})
    return [WORD_BOUNDARY, *chars]


def grapheme_tokenize(transcript, vocab: Vocab) -> TokenSequence:
    if not transcript:
        raise ValueError("empty transcript")
    syms: list[str] = []
    for i, word in enumerate(transcript):
        if i:
            syms.append(WORD_BOUNDARY)
        syms.extend(word)
    for c in syms:
        if c not in vocab:
            raise KeyError(f"character {c!r} not in grapheme vocabulary")
    return TokenSequence(tuple(vocab.ids(syms)), vocab)


def detokenize(tokens: TokenSequence | list[str]) -> list[str]:
    """Join grapheme or subword units back into words on the boundary symbol."""
    syms = tokens.symbols() if isinstance(tokens, TokenSequence) else list(tokens)
    syms = [s for s in syms if s != MASK]
    return [w for w in "".join(syms).split(WORD_BOUNDARY) if w]


# ---------------------------------------------------------------------------
# BPE
# ---------------------------------------------------------------------------


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    units: list[str]  # graphemes first, then one unit per merge
    _cache: dict[str, tuple[str, ...]] = field(default_factory=dict, compare=False, repr=False)

    def vocab(self) -> Vocab:
        return Vocab(self.units)

    def segment(self, word: str) -> tuple[str, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = list(word)
        for a, b in self.merges:
            if len(syms) < 2:
                break
            i, out = 0, []
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            syms = out
        self._cache[word] = tuple(syms)
        return self._cache[word]

    def save(self, path) -> None:
        lines = [BPE_HEADER, *(f"{a} {b}" for a, b in self.merges)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        Path(str(path) + ".units").write_text("".join(u + "\n" for u in self.units), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != BPE_HEADER:
            raise ValueError(f"{path}: not a ustr BPE model (expected header {BPE_HEADER!r})")
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: malformed merge line")
            merges.append((parts[0], parts[1]))
        units = Path(str(path) + ".units").read_text(encoding="utf-8").splitlines()
        return cls(merges, units)


def bpe_train(transcripts, num_merges: int) -> BpeModel:
    """Learn ``num_merges`` merges; ties go to the lexicographically smallest pair.

    Merges never cross word boundaries; the boundary symbol stays a unit of its own.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    words = Counter(w for t in transcripts for w in t)
    if not words:
        raise ValueError("cannot train BPE on an empty corpus")
    units = grapheme_symbols([list(words)])
    segs = {w: tuple(w) for w in words}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for w, n in words.items():
            s = segs[w]
            for i in range(len(s) - 1):
                pairs[(s[i], s[i + 1])] += n
        if not pairs:
            break
        best = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == best)
        merges.append(pair)
        units.append(pair[0] + pair[1])
        a, b = pair
        for w, s in segs.items():
            if len(s) < 2:
                continue
            i, out = 0, []
            while i < len(s):
                if i + 1 < len(s) and s[i] == a and s[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            segs[w] = tuple(out)
    # two different merges can produce the same string; keep the first
    units = list(dict.fromkeys(units))
    return BpeModel(merges, units)


def bpe_encode(model: BpeModel, transcript, vocab: Vocab | None = None) -> TokenSequence:
    vocab = vocab or model.vocab()
    syms: list[str] = []
    for i, word in enumerate(transcript):
        if i:
            syms.append(WORD_BOUNDARY)
        syms.extend(model.segment(word))
    return TokenSequence(tuple(vocab.ids(syms)), vocab)


# ---------------------------------------------------------------------------
# phonemes
# ---------------------------------------------------------------------------


def g2p(lexicon: Lexicon, transcript, vocab: Vocab) -> TokenSequence:
    """Strict lexicon lookup; an out-of-vocabulary word is an error."""
    syms: list[str] = []
    for word in transcript:
        if word not in lexicon:
            raise KeyError(f"word {word!r} not in lexicon")
        syms.extend(lexicon[word])
    return TokenSequence(tuple(vocab.ids(syms)), vocab)


# ---------------------------------------------------------------------------
# mask / repeat
# ---------------------------------------------------------------------------


def _ids(tokens) -> np.ndarray:
    ids = tokens.array() if isinstance(tokens, TokenSequence) else np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty token sequence")
    return ids


def mask_then_repeat(tokens, cfg: TextRepConfig, rng: np.random.Generator) -> TextFeatureSequence:
    ids = _ids(tokens)
    masked = np.where(rng.random(ids.shape[0]) < cfg.mask_prob, cfg.mask_token_id, ids)
    return TextFeatureSequence(np.repeat(masked, cfg.repeat), cfg)


def repeat_then_mask(tokens, cfg: TextRepConfig, rng: np.random.Generator) -> TextFeatureSequence:
    rep = np.repeat(_ids(tokens), cfg.repeat)
    return TextFeatureSequence(np.where(rng.random(rep.shape[0]) < cfg.mask_prob, cfg.mask_token_id, rep), cfg)


# ---------------------------------------------------------------------------
# featurizer bundle
# ---------------------------------------------------------------------------


class TextFeaturizer:
    """Maps a transcript to pre-mask text-encoder ids for one unit type."""

    def __init__(self, unit: str, vocab: Vocab, bpe: BpeModel | None = None, lexicon: Lexicon | None = None):
        if unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")
        if vocab.mask_id is None:
            raise ValueError("text vocabulary must reserve a mask id")
        if unit == "subword" and bpe is None:
            raise ValueError("subword features need a BPE model")
        if unit == "phoneme" and lexicon is None:
            raise ValueError("phoneme features need a lexicon")
        self.unit = unit
        self.vocab = vocab
        self.bpe = bpe
        self.lexicon = lexicon

    @classmethod
    def build(cls, unit: str, transcripts=None, bpe: BpeModel | None = None, lexicon=None, phonemes=None):
        if unit == "grapheme":
            syms = grapheme_symbols(transcripts)
        elif unit == "subword":
            syms = list(bpe.units) + [WORD_BOUNDARY]
        else:
            syms = list(phonemes)
        return cls(unit, Vocab(dict.fromkeys(syms), with_mask=True), bpe=bpe, lexicon=lexicon)

    def __call__(self, transcript) -> TokenSequence:
        if self.unit == "grapheme":
            return grapheme_tokenize(transcript, self.vocab)
        if self.unit == "subword":
            return bpe_encode(self.bpe, transcript, self.vocab)
        return g2p(self.lexicon, transcript, self.vocab)


def output_vocab(bpe: BpeModel) -> Vocab:
    """Transducer label vocabulary: BPE units plus the word boundary, no mask."""
    return Vocab(dict.fromkeys([WORD_BOUNDARY, *bpe.units]))
