"""Word normalization, vocabulary building, and integer feature encoding.

Each word becomes 5 integers: a vocabulary id over normalized text plus its
four box coordinates quantized to [0, 1023] as fractions of the page extent.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass

from .docmodel import Page, Word

QUANT_BINS = 1024
DEFAULT_VOCAB_SIZE = 30015
UNK_TOKEN = "<UNK>"
READING_BUCKET = 32


def normalize_word(text: str) -> str:
    """Collapse text onto the 4-character alphabet {'a', 'A', '1', ','}.

    Lowercase letters map to 'a', uppercase to 'A', digits to '1'; whitespace
    is removed and anything else becomes ','. Accented characters are first
    decomposed so that their base letter survives; characters with no ASCII
    base (currency signs, CJK, ...) end up as ','.
    """
    out = []
    for ch in unicodedata.normalize("NFD", text):
        if unicodedata.combining(ch):
            continue
        if ch.isspace():
            continue
        if "a" <= ch <= "z":
            out.append("a")
        elif "A" <= ch <= "Z":
            out.append("A")
        elif "0" <= ch <= "9":
            out.append("1")
        else:
            out.append(",")
    return "".join(out)


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]
    unk_id: int

    def __len__(self) -> int:
        return len(self.token_to_id) + 1

    def lookup(self, normalized: str) -> int:
        return self.token_to_id.get(normalized, self.unk_id)

    def id_for_word(self, text: str) -> int:
        return self.lookup(normalize_word(text))


def build_vocab(corpus, max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Keep the ``max_size`` most frequent normalized strings; UNK is appended last.

    Ties in frequency break lexicographically ascending so builds are
    reproducible regardless of corpus order.
    """
    counts = Counter()
    for tok in corpus:
        counts[tok] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    token_to_id = {tok: i for i, (tok, _) in enumerate(ranked)}
    return Vocabulary(token_to_id=token_to_id, unk_id=len(token_to_id))


def vocab_from_pages(pages, max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    def stream():
        for page in pages:
            for w in page.words:
                yield normalize_word(w.text)

    return build_vocab(stream(), max_size=max_size)


def save_vocab(path, vocab: Vocabulary) -> None:
    """Plain text, one token per line, line number = id, final line is UNK."""
    ordered = sorted(vocab.token_to_id.items(), key=lambda kv: kv[1])
    with open(path, "w", encoding="utf-8") as f:
        for tok, _ in ordered:
            f.write(tok + "\n")
        f.write(UNK_TOKEN + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[-1] != UNK_TOKEN:
        raise ValueError(f"vocabulary file {path} must end with {UNK_TOKEN}")
    tokens = lines[:-1]
    return Vocabulary(token_to_id={t: i for i, t in enumerate(tokens)}, unk_id=len(tokens))


def quantize_coord(value: float, extent: float) -> int:
    """floor(1024 * value / extent) clamped into [0, 1023]."""
    if not math.isfinite(value):
        raise ValueError(f"cannot quantize non-finite value {value}")
    if not (math.isfinite(extent) and extent > 0):
        raise ValueError(f"extent must be a positive finite number, got {extent}")
    q = math.floor(QUANT_BINS * value / extent)
    return min(max(q, 0), QUANT_BINS - 1)


@dataclass(frozen=True)
class TokenFeatures:
    word_id: int
    qx0: int
    qy0: int
    qx1: int
    qy1: int

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.word_id, self.qx0, self.qy0, self.qx1, self.qy1)


def _reading_key(word: Word, height: float):
    yc = 0.5 * (word.box.y0 + word.box.y1)
    bucket = quantize_coord(yc, height) // READING_BUCKET
    return (bucket, word.box.x0, word.box.y0, word.box.x1, word.box.y1, word.text)


def reading_order(page: Page) -> list[int]:
    """Canonical reading order: words bucketed by vertical center, then left to right.

    Returns original word indices in canonical sequence. The model itself has
    no position signal, so this order only controls chunk windows on long
    pages; it must simply be a deterministic function of word geometry.
    """
    return sorted(range(page.n_words), key=lambda i: _reading_key(page.words[i], page.height))


def sort_page(page: Page) -> Page:
    """Return the page with words in canonical reading order."""
    order = reading_order(page)
    return Page(width=page.width, height=page.height, words=tuple(page.words[i] for i in order))


def encode_page(page: Page, vocab: Vocabulary) -> list[TokenFeatures]:
    """Sort words into canonical reading order and emit one feature tuple per word."""
    feats = []
    for w in sort_page(page).words:
        feats.append(
            TokenFeatures(
                word_id=vocab.id_for_word(w.text),
                qx0=quantize_coord(w.box.x0, page.width),
                qy0=quantize_coord(w.box.y0, page.height),
                qx1=quantize_coord(w.box.x1, page.width),
                qy1=quantize_coord(w.box.y1, page.height),
            )
        )
    return feats
