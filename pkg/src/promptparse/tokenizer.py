"""Whitespace word vocabulary with registrable atomic tokens."""
from __future__ import annotations

import os
import re
from typing import Iterable, List, Optional, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class TokenizerError(ValueError):
    pass


class DuplicateSurface(TokenizerError):
    pass


class IdOutOfRange(TokenizerError):
    pass


class Vocabulary:
    """Dense id <-> surface mapping.

    Ids 0-3 are reserved for padding, sequence start/end and unknown words.
    Atomic tokens are matched as whole substrings before whitespace splitting,
    so a surface like ``IN:GET_WEATHER`` inside ``[IN:GET_WEATHER`` becomes a
    single id.
    """

    def __init__(self, surfaces: Sequence[str] = (), atomic: Iterable[str] = ()):
        self.surfaces: List[str] = list(RESERVED)
        self.index = {s: i for i, s in enumerate(self.surfaces)}
        for s in surfaces:
            if s not in self.index:
                self._append(s)
        self.atomic: List[str] = []
        self._atomic_re: Optional[re.Pattern] = None
        for s in atomic:
            if s not in self.index:
                self._append(s)
            self.atomic.append(s)
        self._compile()

    def __len__(self):
        return len(self.surfaces)

    def __contains__(self, surface):
        return surface in self.index

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.surfaces == other.surfaces
            and self.atomic == other.atomic
        )

    def _append(self, surface: str) -> int:
        if not surface or "\n" in surface:
            raise TokenizerError(f"invalid token surface {surface!r}")
        self.index[surface] = len(self.surfaces)
        self.surfaces.append(surface)
        return self.index[surface]

    def _compile(self):
        if self.atomic:
            alts = sorted(self.atomic, key=lambda s: (-len(s), s))
            self._atomic_re = re.compile("(" + "|".join(map(re.escape, alts)) + ")")
        else:
            self._atomic_re = None


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    words = []
    seen = set(RESERVED)
    for text in corpus:
        for w in text.split():
            if w not in seen:
                seen.add(w)
                words.append(w)
    return Vocabulary(words)


def add_atomic_token(vocab: Vocabulary, surface: str) -> int:
    if surface in vocab.index:
        raise DuplicateSurface(f"token {surface!r} already in vocabulary")
    idx = vocab._append(surface)
    vocab.atomic.append(surface)
    vocab._compile()
    return idx


def segment(vocab: Vocabulary, text: str) -> List[str]:
    """Split ``text`` into token surfaces, atomic matches first."""
    if vocab._atomic_re is None:
        return text.split()
    out = []
    for i, piece in enumerate(vocab._atomic_re.split(text)):
        if i % 2:
            out.append(piece)
        else:
            out.extend(piece.split())
    return out


def encode(vocab: Vocabulary, text: str) -> List[int]:
    return [vocab.index.get(w, UNK) for w in segment(vocab, text)]


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    words = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IdOutOfRange(f"token id {i} outside vocabulary of size {n}")
        if i > UNK:
            words.append(vocab.surfaces[i])
    return " ".join(words)


def strip_atomic(text: str, surfaces: Iterable[str]) -> str:
    """Blank out atomic surfaces so word-level vocabulary building skips them."""
    surfaces = sorted(set(surfaces), key=lambda s: (-len(s), s))
    if not surfaces:
        return text
    return re.sub("|".join(map(re.escape, surfaces)), " ", text)


def save_vocab(vocab: Vocabulary, path) -> None:
    """One surface per line (line number = id); atomic registry in ``<path>.atomic``."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in vocab.surfaces:
            f.write(s + "\n")
    atomic_path = str(path) + ".atomic"
    if vocab.atomic:
        with open(atomic_path, "w", encoding="utf-8", newline="\n") as f:
            for s in vocab.atomic:
                f.write(s + "\n")
    elif os.path.exists(atomic_path):
        os.remove(atomic_path)


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8", newline="\n") as f:
        surfaces = [line.rstrip("\n") for line in f]
    if tuple(surfaces[:4]) != RESERVED:
        raise TokenizerError(f"{path}: first four lines must be the reserved tokens")
    atomic = []
    atomic_path = str(path) + ".atomic"
    if os.path.exists(atomic_path):
        with open(atomic_path, encoding="utf-8", newline="\n") as f:
            atomic = [line.rstrip("\n") for line in f if line.strip()]
    vocab = Vocabulary(surfaces[4:])
    for s in atomic:
        if s not in vocab.index:
            raise TokenizerError(f"atomic token {s!r} missing from {path}")
        vocab.atomic.append(s)
    vocab._compile()
    return vocab
