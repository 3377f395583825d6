"""Dataset records, file formats and low-resource samplers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .meaning_repr import ParseError, ontology_labels, parse_top


class DatasetError(ValueError):
    pass


class MalformedRecord(DatasetError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingField(MalformedRecord):
    def __init__(self, name, line):
        super().__init__(f"missing field {name!r}", line)
        self.field = name


class TooFewExamples(DatasetError):
    pass


@dataclass(frozen=True)
class Example:
    utterance: str
    meaning: str
    canonical: Optional[str] = None
    domain: str = ""

    def __post_init__(self):
        if not self.utterance.strip() or not self.meaning.strip():
            raise ValueError("utterance and meaning must be non-empty")

    def tree(self):
        return parse_top(self.meaning)

    def to_record(self) -> dict:
        return {
            "utterance": self.utterance,
            "meaning": self.meaning,
            "canonical": self.canonical,
            "domain": self.domain,
        }


@dataclass
class Dataset:
    examples: List[Example]
    split: str = "all"
    meta: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def domains(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for ex in self.examples:
            counts[ex.domain] = counts.get(ex.domain, 0) + 1
        return counts

    def derive(self, examples, split, **meta) -> "Dataset":
        return Dataset(list(examples), split, {**self.meta, **meta})


# -- file formats ---------------------------------------------------------

def load_jsonl(path, split: str = "all") -> Dataset:
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(f"invalid JSON ({e.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise MalformedRecord("record is not an object", lineno)
            for key in ("utterance", "meaning"):
                if key not in rec or rec[key] is None:
                    raise MissingField(key, lineno)
            try:
                examples.append(
                    Example(
                        str(rec["utterance"]),
                        str(rec["meaning"]),
                        rec.get("canonical"),
                        str(rec.get("domain") or ""),
                    )
                )
            except ValueError as e:
                raise MalformedRecord(str(e), lineno) from None
    return Dataset(examples, split, {"source": str(path)})


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in dataset.examples:
            f.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def load_top_tsv(path, split: str = "all") -> Dataset:
    """utterance TAB meaning [TAB domain]; meanings must parse as TOP trees."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise MissingField("meaning", lineno)
            if len(cols) > 3:
                raise MalformedRecord(f"expected at most 3 columns, got {len(cols)}", lineno)
            try:
                parse_top(cols[1])
            except ParseError as e:
                raise MalformedRecord(f"unparseable meaning: {e}", lineno) from None
            try:
                examples.append(Example(cols[0], cols[1], None, cols[2] if len(cols) == 3 else ""))
            except ValueError as e:
                raise MalformedRecord(str(e), lineno) from None
    return Dataset(examples, split, {"source": str(path)})


def save_top_tsv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in dataset.examples:
            f.write(f"{ex.utterance}\t{ex.meaning}\t{ex.domain}\n")


def load_dataset(path, split: str = "all") -> Dataset:
    if str(path).endswith((".tsv", ".txt")):
        return load_top_tsv(path, split)
    return load_jsonl(path, split)


def write_split_meta(dataset: Dataset, path) -> None:
    keys = ("source", "method", "params", "seed")
    record = {k: dataset.meta.get(k) for k in keys}
    record["split"] = dataset.split
    record["size"] = len(dataset)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


# -- samplers -------------------------------------------------------------

def overnight_split(dataset: Dataset, n_train: int = 200, val_frac: float = 0.2, seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """Uniform ``n_train`` training examples; ``val_frac`` of the rest for validation."""
    if len(dataset) <= n_train:
        raise TooFewExamples(f"need more than {n_train} examples, have {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    rest = len(dataset) - n_train
    n_val = int(round(val_frac * rest))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    meta = dict(method="overnight", params={"n_train": n_train, "val_frac": val_frac}, seed=seed)
    return tuple(
        dataset.derive([dataset.examples[i] for i in idx], name, **meta)
        for idx, name in zip(parts, ("train", "val", "test"))
    )


def _spis_indices(examples, k: int, seed: int) -> List[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.random.default_rng(seed).permutation(len(examples))
    counts: Dict = {}
    kept = []
    for i in order:
        labels = ontology_labels(examples[i].tree())
        if any(counts.get(lab, 0) < k for lab in labels):
            kept.append(int(i))
            for lab in labels:
                counts[lab] = counts.get(lab, 0) + 1
    return kept


def spis_sample(dataset: Dataset, k: int, seed: int = 0) -> Dataset:
    """Samples-per-intent-and-slot selection.

    One greedy pass over a seeded shuffle keeps an example when at least one
    of its ontology labels has been seen in fewer than ``k`` kept examples.
    Every label therefore ends up in at least ``min(k, available)`` kept
    examples; labels that co-occur with rarer ones can exceed ``k``.
    """
    kept = _spis_indices(dataset.examples, k, seed)
    return dataset.derive([dataset.examples[i] for i in kept], "train", method="spis", params={"k": k}, seed=seed)


def spis_split(dataset: Dataset, k: int, val_frac: float = 0.2, test_frac: float = 0.3, seed: int = 0):
    """Hold out a test set, SPIS-sample training data from the rest, then
    take ``val_frac`` of what is left for validation."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(test_frac * len(dataset)))
    test_idx, pool_idx = order[:n_test], order[n_test:]
    pool = [dataset.examples[i] for i in pool_idx]
    kept = _spis_indices(pool, k, seed)
    chosen = set(kept)
    rest = [ex for i, ex in enumerate(pool) if i not in chosen]
    n_val = int(round(val_frac * len(rest)))
    meta = dict(method="spis", params={"k": k, "val_frac": val_frac, "test_frac": test_frac}, seed=seed)
    return (
        dataset.derive([pool[i] for i in kept], "train", **meta),
        dataset.derive(rest[:n_val], "val", **meta),
        dataset.derive([dataset.examples[i] for i in test_idx], "test", **meta),
    )


def label_counts(examples: Iterable[Example]) -> Dict:
    counts: Dict = {}
    for ex in examples:
        for lab in ontology_labels(parse_top(ex.meaning)):
            counts[lab] = counts.get(lab, 0) + 1
    return counts
