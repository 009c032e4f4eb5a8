"""Tokenisation, vocabularies and synthetic toy corpora."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

PAD, UNK, SOFT = "<pad>", "<unk>", "<soft>"
SCHEMES = ("char", "whitespace")

ALPHABET64 = string.ascii_lowercase + string.ascii_uppercase + string.digits + " ."


class TokenizeError(ValueError):
    pass


@dataclass
class Vocab:
    """Token list with ``<pad>`` at 0, ``<unk>`` at 1 and the soft prompt as the last id."""

    symbols: List[str]
    scheme: str = "char"
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self.index = {s: i for i, s in enumerate(self.tokens)}

    @property
    def tokens(self) -> List[str]:
        return [PAD, UNK] + list(self.symbols) + [SOFT]

    def __len__(self):
        return len(self.symbols) + 3

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def soft_id(self) -> int:
        return len(self) - 1

    def split(self, text: str) -> List[str]:
        return list(text) if self.scheme == "char" else text.split()

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index.get(t, self.unk_id) for t in self.split(text)], dtype=np.int64)

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        toks = self.tokens
        out = []
        for i in ids:
            i = int(i)
            if skip_special and (i in (0, 1) or i == self.soft_id):
                continue
            out.append(toks[i])
        return ("" if self.scheme == "char" else " ").join(out)

    def token_text(self, i: int) -> str:
        return self.tokens[int(i)]

    def to_json(self) -> str:
        return json.dumps({"scheme": self.scheme, "symbols": self.symbols}, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        d = json.loads(text)
        return cls(list(d["symbols"]), d["scheme"])

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def decode_utf8(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise TokenizeError(f"invalid UTF-8 at byte offset {e.start}") from None


def build_vocab(texts: Iterable[str], scheme: str = "char", extra: str = "") -> Vocab:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    seen = {}
    for text in list(texts) + [extra]:
        for t in (list(text) if scheme == "char" else text.split()):
            seen.setdefault(t, None)
    return Vocab(sorted(seen), scheme)


def tokenize(text: Union[str, bytes], scheme: str = "char", vocab: Optional[Vocab] = None) -> Tuple[np.ndarray, Vocab]:
    """Token ids for one text, building a vocabulary from it when none is given."""
    if isinstance(text, bytes):
        text = decode_utf8(text)
    if vocab is None:
        vocab = build_vocab([text], scheme)
    return vocab.encode(text), vocab


def tokenize_corpus(text: Union[str, bytes], scheme: str = "char", vocab: Optional[Vocab] = None) -> Tuple[List[np.ndarray], Vocab]:
    """One document per line; blank lines are skipped."""
    if isinstance(text, bytes):
        text = decode_utf8(text)
    docs = [line for line in text.split("\n") if line.strip()]
    if vocab is None:
        vocab = build_vocab(docs, scheme)
    return [vocab.encode(d) for d in docs], vocab


def detokenize(ids, vocab: Vocab) -> str:
    return vocab.decode(ids)


def read_pairs(text: Union[str, bytes]) -> List[Tuple[str, str]]:
    """Tab-separated (input, target) pairs, one per line."""
    if isinstance(text, bytes):
        text = decode_utf8(text)
    pairs = []
    for n, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TokenizeError(f"line {n}: expected 2 tab-separated fields, got {len(parts)}")
        pairs.append((parts[0], parts[1]))
    return pairs


def alphabet_vocab() -> Vocab:
    return Vocab(sorted(ALPHABET64), "char")


def synthetic_documents(n_docs: int, length: int, rng: np.random.Generator, alphabet: str = ALPHABET64) -> List[str]:
    """Patterned repeats interleaved with random spans over ``alphabet``."""
    docs = []
    for _ in range(n_docs):
        parts = []
        while sum(map(len, parts)) < length:
            if rng.random() < 0.5:
                motif = "".join(rng.choice(list(alphabet), size=rng.integers(2, 5)))
                parts.append(motif * int(rng.integers(2, 4)))
            else:
                parts.append("".join(rng.choice(list(alphabet), size=rng.integers(3, 8))))
        docs.append("".join(parts)[:length])
    return docs


KEY_ALPHABET = string.ascii_uppercase
FILLER_ALPHABET = "abcdefgh"


def planted_key_documents(n_docs: int, length: int, rng: np.random.Generator, key_len: int = 4, query_at: Optional[int] = None, period: int = 3) -> List[str]:
    """Long-range dependency corpus: ``#KEY.`` first, periodic filler, then ``?KEY.`` near the end.

    The key (uppercase letters) can only be predicted at the query by
    recalling its planted copy; the filler repeats a random lowercase motif
    of ``period`` symbols, so a short window predicts it.
    """
    q = length - key_len - 4 if query_at is None else query_at
    docs = []
    for _ in range(n_docs):
        key = "".join(rng.choice(list(KEY_ALPHABET), size=key_len))
        head = "#" + key + "."
        filler_len = q - len(head)
        tail_len = length - q - key_len - 2
        if filler_len < 1 or tail_len < 0:
            raise ValueError("document too short for the planted key layout")
        motif = "".join(rng.choice(list(FILLER_ALPHABET), size=period))
        reps = motif * (length // period + 2)
        docs.append(head + reps[:filler_len] + "?" + key + "." + reps[filler_len: filler_len + tail_len])
    return docs


def planted_vocab() -> Vocab:
    return Vocab(sorted(set(KEY_ALPHABET + FILLER_ALPHABET + " #.?")), "char")


def word_lengths(text: str) -> List[int]:
    """Partition a char-level text into words, each word owning its trailing spaces."""
    out, cur = [], 0
    for i, ch in enumerate(text):
        cur += 1
        nxt = text[i + 1] if i + 1 < len(text) else None
        if ch == " " and nxt != " ":
            out.append(cur)
            cur = 0
    if cur:
        out.append(cur)
    return out
