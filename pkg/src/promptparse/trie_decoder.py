"""Prefix trie over target token sequences and (constrained) beam search."""
from __future__ import annotations

from typing import Callable, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tokenizer import EOS

NEG_INF = float("-inf")


class EmptySequence(ValueError):
    pass


class NoValidPath(RuntimeError):
    pass


class _Node:
    __slots__ = ("children", "terminal")

    def __init__(self):
        self.children = {}
        self.terminal = False


class Trie:
    """Immutable-after-build prefix tree of token-id sequences."""

    def __init__(self):
        self.root = _Node()
        self.size = 0
        self.max_len = 0

    def __len__(self):
        return self.size

    def _insert(self, seq: Sequence[int]) -> None:
        if len(seq) == 0:
            raise EmptySequence("cannot store an empty sequence")
        node = self.root
        for tok in seq:
            tok = int(tok)
            child = node.children.get(tok)
            if child is None:
                child = node.children[tok] = _Node()
            node = child
        if not node.terminal:
            node.terminal = True
            self.size += 1
            self.max_len = max(self.max_len, len(seq))

    def _find(self, prefix: Sequence[int]) -> Optional[_Node]:
        node = self.root
        for tok in prefix:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node

    def contains(self, seq: Sequence[int]) -> bool:
        node = self._find(seq)
        return node is not None and node.terminal

    __contains__ = contains

    def continuations(self, prefix: Sequence[int]) -> Tuple[FrozenSet[int], bool]:
        node = self._find(prefix)
        if node is None:
            return frozenset(), False
        return frozenset(node.children), node.terminal

    def sequences(self) -> Iterator[Tuple[int, ...]]:
        """Stored sequences in lexicographic order."""

        def walk(node, prefix):
            if node.terminal:
                yield tuple(prefix)
            for tok in sorted(node.children):
                prefix.append(tok)
                yield from walk(node.children[tok], prefix)
                prefix.pop()

        yield from walk(self.root, [])


def build_trie(sequences: Iterable[Sequence[int]]) -> Trie:
    trie = Trie()
    for seq in sequences:
        trie._insert(seq)
    if trie.size == 0:
        raise EmptySequence("no sequences given")
    return trie


def continuations(trie: Trie, prefix: Sequence[int]) -> Tuple[FrozenSet[int], bool]:
    return trie.continuations(prefix)


def save_trie(trie: Trie, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for seq in trie.sequences():
            f.write(" ".join(map(str, seq)) + "\n")


def load_trie(path) -> Trie:
    with open(path, encoding="ascii") as f:
        return build_trie([int(t) for t in line.split()] for line in f if line.strip())


# -- beam search ----------------------------------------------------------

# A scorer maps (source ids, target prefix ids) to a log-probability vector
# over the vocabulary.  Objects may also offer ``score_batch(source, prefixes)``
# returning a (len(prefixes), V) array; beam search uses it when present.
Scorer = Callable[[Sequence[int], Sequence[int]], np.ndarray]


class Beam:
    __slots__ = ("prefix", "logprob", "finished")

    def __init__(self, prefix: Tuple[int, ...], logprob: float, finished: bool = False):
        self.prefix = prefix
        self.logprob = logprob
        self.finished = finished

    def sort_key(self):
        return (-self.logprob, self.prefix, self.finished)

    def __repr__(self):
        state = "done" if self.finished else "open"
        return f"Beam({list(self.prefix)}, {self.logprob:.4f}, {state})"


def _score(scorer, source, prefixes: List[Tuple[int, ...]]) -> np.ndarray:
    batch = getattr(scorer, "score_batch", None)
    if batch is not None:
        return np.asarray(batch(source, prefixes), dtype=np.float64)
    return np.stack([np.asarray(scorer(source, p), dtype=np.float64) for p in prefixes])


def _search(scorer, source, beam_width, max_len, allowed) -> List[Beam]:
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    beams = [Beam((), 0.0)]
    for step in range(max_len + 1):
        open_beams = [b for b in beams if not b.finished]
        if not open_beams:
            break
        scores = _score(scorer, source, [b.prefix for b in open_beams])
        candidates = [b for b in beams if b.finished]
        for beam, row in zip(open_beams, scores):
            tokens, may_end = allowed(beam.prefix)
            if step < max_len and len(tokens):
                tokens = np.asarray(tokens, dtype=np.int64)
                vals = row[tokens]
                # only a beam's own top-k children can survive the global cut
                order = np.lexsort((tokens, -vals))[:beam_width]
                for tok, lp in zip(tokens[order].tolist(), vals[order].tolist()):
                    if lp > NEG_INF:
                        candidates.append(Beam(beam.prefix + (tok,), beam.logprob + lp))
            if may_end and row[EOS] > NEG_INF:
                candidates.append(Beam(beam.prefix, beam.logprob + float(row[EOS]), True))
        # sort before truncation keeps the merge independent of expansion order
        candidates.sort(key=Beam.sort_key)
        beams = candidates[:beam_width]
        if not beams:
            break
    return sorted((b for b in beams if b.finished), key=Beam.sort_key)


def constrained_beam_search(
    scorer: Scorer,
    trie: Trie,
    source: Sequence[int],
    beam_width: int = 10,
    max_len: Optional[int] = None,
) -> List[Tuple[Tuple[int, ...], float]]:
    """Beam search restricted to sequences stored in ``trie``.

    Scores of tokens outside the trie continuations are treated as -inf; the
    end-of-sequence transition is only taken where the prefix is a stored
    sequence.  Returns up to ``beam_width`` finished ``(ids, logprob)`` pairs,
    best first, ties broken by token ids.
    """
    if trie.size == 0:
        raise ValueError("empty trie")
    if max_len is None:
        max_len = trie.max_len

    def allowed(prefix):
        tokens, may_end = trie.continuations(prefix)
        return sorted(tokens), may_end

    finished = _search(scorer, source, beam_width, max_len, allowed)
    if not finished:
        raise NoValidPath("every beam was pruned before reaching a stored sequence")
    return [(b.prefix, b.logprob) for b in finished]


def unconstrained_beam_search(
    scorer: Scorer,
    source: Sequence[int],
    beam_width: int = 10,
    max_len: int = 40,
    vocab_size: Optional[int] = None,
) -> List[Tuple[Tuple[int, ...], float]]:
    """Plain beam search over the whole vocabulary; EOS ends a hypothesis."""
    if vocab_size is None:
        vocab_size = len(_score(scorer, source, [()])[0])
    everything = np.array([t for t in range(vocab_size) if t != EOS], dtype=np.int64)

    def allowed(prefix):
        return everything, True

    finished = _search(scorer, source, beam_width, max_len, allowed)
    return [(b.prefix, b.logprob) for b in finished]


def sequence_logprob(scorer: Scorer, source: Sequence[int], seq: Sequence[int]) -> float:
    """Raw log-likelihood of ``seq`` followed by EOS; the brute-force reference."""
    total = 0.0
    prefix: Tuple[int, ...] = ()
    for tok in list(seq) + [EOS]:
        total += float(np.asarray(scorer(source, prefix))[tok])
        prefix = prefix + (int(tok),)
    return total


def brute_force_best(scorer: Scorer, source, sequences: Iterable[Sequence[int]]):
    """Exhaustive argmax with the same tie-break as beam search."""
    scored = [(tuple(int(t) for t in s), sequence_logprob(scorer, source, s)) for s in sequences]
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[0] if scored else None
