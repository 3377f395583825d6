"""Target-side canonicalization schemes for TOP trees.

Four variants are supported:

``none``
    plain serialization.
``simplify``
    drop the carrier words that sit directly under an intent; slot values stay.
``outofvocab``
    every ontology label becomes one new atomic vocabulary token.
``invocab``
    every ontology label is replaced by a short identifier (``in0``, ``sl3``)
    made of ordinary words.

The two label variants can be composed with ``simplify`` (simplification is
applied first, then label substitution).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .meaning_repr import (
    OPEN,
    IntentNode,
    OntologyLabel,
    ParseTree,
    SlotNode,
    TokenLeaf,
    lex,
    ontology_labels,
    parse_top,
    relabel,
    serialize,
)

VARIANTS = ("none", "simplify", "outofvocab", "invocab")
LABEL_VARIANTS = ("outofvocab", "invocab")


class CanonicalizationError(ValueError):
    pass


class DuplicateSurrogate(CanonicalizationError):
    pass


class UnknownLabel(CanonicalizationError):
    pass


class UnknownSurrogate(CanonicalizationError):
    pass


@dataclass(frozen=True)
class CanonScheme:
    variant: str = "none"
    shorten_labels: bool = False
    # only meaningful for the label variants
    with_simplify: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown scheme variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def needs_table(self) -> bool:
        return self.variant in LABEL_VARIANTS

    @property
    def simplifies(self) -> bool:
        return self.variant == "simplify" or (self.needs_table and self.with_simplify)

    @property
    def name(self) -> str:
        parts = [self.variant]
        if self.needs_table and self.with_simplify:
            parts.append("simplify")
        if self.needs_table and self.shorten_labels:
            parts.append("short")
        return "+".join(parts)

    @classmethod
    def from_name(cls, name: str) -> "CanonScheme":
        """Inverse of :attr:`name`, e.g. ``"invocab+simplify"``."""
        variant, *flags = name.lower().split("+")
        unknown = set(flags) - {"simplify", "short"}
        if unknown:
            raise ValueError(f"unknown scheme flags {sorted(unknown)} in {name!r}")
        return cls(variant, shorten_labels="short" in flags, with_simplify="simplify" in flags)


@dataclass
class LabelTable:
    """Bijective mapping between ontology label surfaces and surrogate strings."""

    variant: str
    entries: List[Tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.entries = sorted(self.entries)
        self._forward: Dict[str, str] = {}
        self._backward: Dict[str, str] = {}
        for label, surrogate in self.entries:
            if label in self._forward:
                raise CanonicalizationError(f"label {label} listed twice")
            if surrogate in self._backward:
                raise DuplicateSurrogate(
                    f"surrogate {surrogate!r} shared by {self._backward[surrogate]} and {label}"
                )
            self._forward[label] = surrogate
            self._backward[surrogate] = label

    def __len__(self):
        return len(self.entries)

    def surrogate(self, label: str) -> str:
        try:
            return self._forward[label]
        except KeyError:
            raise UnknownLabel(f"label {label} not in label table") from None

    def label(self, surrogate: str) -> str:
        try:
            return self._backward[surrogate]
        except KeyError:
            raise UnknownSurrogate(f"surrogate {surrogate!r} not in label table") from None

    @property
    def atomic_tokens(self) -> List[str]:
        """Surfaces to register as single vocabulary tokens (out-of-vocab scheme only)."""
        if self.variant != "outofvocab":
            return []
        return [s for _, s in self.entries]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for label, surrogate in self.entries:
                f.write(f"{label}\t{surrogate}\n")

    @classmethod
    def load(cls, path, variant: str) -> "LabelTable":
        entries = []
        with open(path, encoding="utf-8", newline="\n") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise CanonicalizationError(f"{path}:{lineno}: expected label<TAB>surrogate")
                entries.append((parts[0], parts[1]))
        return cls(variant, entries)


def simplify(tree: ParseTree) -> ParseTree:
    """Remove every token leaf that is a direct child of an intent node."""

    def walk(node):
        if isinstance(node, IntentNode):
            return IntentNode(
                node.label,
                tuple(walk(c) for c in node.children if not isinstance(c, TokenLeaf)),
            )
        if isinstance(node, SlotNode):
            return SlotNode(node.label, tuple(walk(c) for c in node.children))
        return node

    return walk(tree)


def _shorten(label: OntologyLabel) -> str:
    return label.name.lower()


def build_label_table(labels: Iterable[OntologyLabel], scheme: CanonScheme) -> LabelTable:
    labels = sorted(set(labels))
    if not labels:
        raise ValueError("cannot build a label table from an empty label set")
    if scheme.variant == "invocab":
        counters = {"IN": 0, "SL": 0}
        entries = []
        for label in labels:
            prefix = "in" if label.is_intent else "sl"
            entries.append((label.surface, f"{prefix}{counters[label.namespace]}"))
            counters[label.namespace] += 1
    elif scheme.variant == "outofvocab":
        entries = [
            (label.surface, _shorten(label) if scheme.shorten_labels else label.surface)
            for label in labels
        ]
    else:
        raise ValueError(f"scheme {scheme.variant!r} does not use a label table")
    return LabelTable(scheme.variant, entries)


def apply_scheme(tree: ParseTree, scheme: CanonScheme, table: Optional[LabelTable] = None) -> str:
    if scheme.simplifies:
        tree = simplify(tree)
    if scheme.needs_table:
        if table is None:
            raise ValueError(f"scheme {scheme.name} requires a label table")
        tree = relabel(tree, table.surrogate)
    return serialize(tree)


def decanonicalize(text: str, scheme: CanonScheme, table: Optional[LabelTable] = None) -> ParseTree:
    """Map a target string back to a meaning-representation tree."""
    if not scheme.needs_table:
        return parse_top(text)
    if table is None:
        raise ValueError(f"scheme {scheme.name} requires a label table")
    # rebuild the string with surrogates swapped back; malformed structure is
    # left for parse_top to report
    pieces = []
    for kind, value, _ in lex(text):
        if kind == OPEN:
            pieces.append("[" + (table.label(value) if value else ""))
        else:
            pieces.append(value)
    return parse_top(" ".join(pieces))


def dataset_label_table(trees: Iterable[ParseTree], scheme: CanonScheme) -> Optional[LabelTable]:
    if not scheme.needs_table:
        return None
    labels = set()
    for tree in trees:
        labels |= ontology_labels(tree)
    return build_label_table(labels, scheme)
