"""TOP-style bracketed meaning representations.

A TOP tree is a nest of intent (``IN:``) and slot (``SL:``) nodes laid over
the utterance tokens::

    [IN:GET_WEATHER whats the weather [SL:LOCATION boston ] ]

Trees are immutable; every operation here is a pure function.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, List, Tuple, Union

INTENT_PREFIX = "IN:"
SLOT_PREFIX = "SL:"


class ParseError(ValueError):
    """Base class for malformed bracket strings. ``offset`` is a character index."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnbalancedBrackets(ParseError):
    pass


class EmptyLabel(ParseError):
    pass


class RootNotIntent(ParseError):
    pass


class TrailingContent(ParseError):
    pass


class InvalidLabel(ParseError):
    pass


class InvalidNesting(ParseError):
    pass


@dataclass(frozen=True)
class OntologyLabel:
    namespace: str  # "IN" or "SL"
    name: str

    def __post_init__(self):
        if self.namespace not in ("IN", "SL"):
            raise ValueError(f"unknown label namespace {self.namespace!r}")
        if not self.name or any(c.isspace() or c in "[]" for c in self.name):
            raise ValueError(f"invalid label name {self.name!r}")

    @property
    def surface(self) -> str:
        return f"{self.namespace}:{self.name}"

    @property
    def is_intent(self) -> bool:
        return self.namespace == "IN"

    @classmethod
    def from_surface(cls, surface: str) -> "OntologyLabel":
        namespace, sep, name = surface.partition(":")
        if not sep:
            raise ValueError(f"label {surface!r} has no namespace")
        return cls(namespace, name)

    def __lt__(self, other: "OntologyLabel") -> bool:
        return self.surface < other.surface

    def __str__(self) -> str:
        return self.surface


@dataclass(frozen=True)
class TokenLeaf:
    text: str


@dataclass(frozen=True)
class SlotNode:
    label: str
    children: Tuple[Union["IntentNode", TokenLeaf], ...] = ()


@dataclass(frozen=True)
class IntentNode:
    label: str
    children: Tuple[Union[SlotNode, TokenLeaf], ...] = ()


Node = Union[IntentNode, SlotNode, TokenLeaf]

# The whole tree is represented by its root intent.
ParseTree = IntentNode


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


# -- lexing ---------------------------------------------------------------

OPEN, CLOSE, WORD = "open", "close", "word"


def lex(text: str) -> Iterator[Tuple[str, str, int]]:
    """Yield ``(kind, value, offset)`` triples.

    Brackets are always structural.  An opening bracket may be separated from
    its label by whitespace (``[ IN:A``), which is how word-level decoding of
    atomic label tokens comes back out of the tokenizer.
    """
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c == "[":
            start = i
            i += 1
            while i < n and text[i].isspace():
                i += 1
            j = i
            while j < n and not text[j].isspace() and text[j] not in "[]":
                j += 1
            yield OPEN, text[i:j], start
            i = j
        elif c == "]":
            yield CLOSE, "]", i
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "[]":
                j += 1
            yield WORD, text[i:j], i
            i = j


# -- parsing --------------------------------------------------------------

def _check_label(label: str, offset: int) -> None:
    if label in ("", INTENT_PREFIX, SLOT_PREFIX):
        raise EmptyLabel("empty ontology label", offset)
    if not (label.startswith(INTENT_PREFIX) or label.startswith(SLOT_PREFIX)):
        raise InvalidLabel(f"label {label!r} lacks an IN:/SL: prefix", offset)


def parse_top(text: str) -> ParseTree:
    """Parse a bracketed TOP string into a tree.

    Raises one of the :class:`ParseError` subclasses on malformed input.
    """
    tokens = list(lex(text))
    if not tokens or tokens[0][0] != OPEN:
        raise RootNotIntent("input does not start with an intent bracket", 0)
    # stack entries: [label, offset, children]
    stack: List[list] = []
    root = None
    for kind, value, offset in tokens:
        if root is not None:
            raise TrailingContent("content after the root node", offset)
        if kind == OPEN:
            _check_label(value, offset)
            if not stack and not value.startswith(INTENT_PREFIX):
                raise RootNotIntent(f"root label {value!r} is not an intent", offset)
            if stack:
                parent = stack[-1][0]
                if parent.startswith(INTENT_PREFIX) == value.startswith(INTENT_PREFIX):
                    raise InvalidNesting(f"{value} directly under {parent}", offset)
            stack.append([value, offset, []])
        elif kind == CLOSE:
            if not stack:
                raise UnbalancedBrackets("unmatched closing bracket", offset)
            label, _, children = stack.pop()
            if label.startswith(INTENT_PREFIX):
                node: Node = IntentNode(label, tuple(children))
            else:
                node = SlotNode(label, tuple(children))
            if stack:
                stack[-1][2].append(node)
            else:
                root = node
        else:
            if not stack:
                raise TrailingContent("token outside any bracket", offset)
            stack[-1][2].append(TokenLeaf(value))
    if stack:
        raise UnbalancedBrackets("unclosed bracket", stack[-1][1])
    return root


def serialize(tree: Node) -> str:
    if isinstance(tree, TokenLeaf):
        return tree.text
    parts = ["[" + tree.label]
    parts.extend(serialize(child) for child in tree.children)
    parts.append("]")
    return " ".join(parts)


def iter_nodes(tree: Node) -> Iterator[Node]:
    yield tree
    if not isinstance(tree, TokenLeaf):
        for child in tree.children:
            yield from iter_nodes(child)


def depth(tree: Node) -> int:
    """Number of intent/slot nodes on the longest root-to-leaf path (root is 1)."""
    if isinstance(tree, TokenLeaf):
        return 0
    return 1 + max((depth(c) for c in tree.children), default=0)


def node_count(tree: Node) -> int:
    return sum(1 for _ in iter_nodes(tree))


def ontology_labels(tree: Node) -> frozenset:
    return frozenset(
        OntologyLabel.from_surface(n.label)
        for n in iter_nodes(tree)
        if not isinstance(n, TokenLeaf)
    )


def leaf_tokens(tree: Node) -> List[str]:
    """Utterance tokens covered by the tree, in order."""
    return [n.text for n in iter_nodes(tree) if isinstance(n, TokenLeaf)]


def relabel(tree: Node, mapping) -> Node:
    """Return a copy of ``tree`` with every label passed through ``mapping``."""
    if isinstance(tree, TokenLeaf):
        return tree
    children = tuple(relabel(c, mapping) for c in tree.children)
    return type(tree)(mapping(tree.label), children)


_LABEL_RE = re.compile(r"\[\s*((?:IN|SL):[^\s\[\]]+)")


def scan_labels(text: str) -> frozenset:
    """Regex scan for label surfaces; an independent check on :func:`ontology_labels`."""
    return frozenset(_LABEL_RE.findall(text))
