"""Exact-match scoring and multi-run aggregation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from .canonicalize import CanonicalizationError, CanonScheme, LabelTable, decanonicalize, simplify
from .meaning_repr import ParseError, normalize_ws, parse_top, serialize

RESULT_FIELDS = ("domain", "scheme", "tuning", "decoding", "seed", "n", "accuracy")


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RunResult:
    domain: str
    scheme: str
    tuning: str
    decoding: str
    seed: int
    n: int
    n_correct: int

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.n_correct, self.n) if self.n else Fraction(0)

    def row(self) -> Dict[str, str]:
        return {
            "domain": self.domain,
            "scheme": self.scheme,
            "tuning": self.tuning,
            "decoding": self.decoding,
            "seed": str(self.seed),
            "n": str(self.n),
            "accuracy": f"{float(self.accuracy):.4f}",
        }


def _gold_form(gold: str, scheme: CanonScheme) -> str:
    try:
        tree = parse_top(gold)
    except ParseError:
        # opaque (e.g. lambda-DCS or canonical-utterance) targets compare as text
        return normalize_ws(gold)
    if scheme.simplifies:
        tree = simplify(tree)
    return serialize(tree)


def _prediction_form(pred: str, scheme: CanonScheme, table: Optional[LabelTable]) -> Optional[str]:
    try:
        return serialize(decanonicalize(pred, scheme, table))
    except (ParseError, CanonicalizationError):
        return None


def exact_match(
    predictions: Sequence[str],
    golds: Sequence[str],
    scheme: Optional[CanonScheme] = None,
    table: Optional[LabelTable] = None,
) -> Tuple[float, List[bool]]:
    """Compare predictions (target space) with gold meanings.

    Predictions are decanonicalized and re-serialized; golds are serialized,
    simplified first when the scheme simplifies.  Opaque golds that do not
    parse as TOP trees are compared after whitespace normalization.
    Unparseable predictions count as misses.
    """
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(golds)} golds")
    scheme = scheme or CanonScheme()
    flags = []
    for pred, gold in zip(predictions, golds):
        g = _gold_form(gold, scheme)
        p = _prediction_form(pred, scheme, table)
        if p is None and not scheme.needs_table:
            p = normalize_ws(pred)
        flags.append(p is not None and p == g)
    acc = sum(flags) / len(flags) if flags else 0.0
    return acc, flags


def aggregate(results: Sequence[RunResult], group_by: Sequence[str] = ("domain", "scheme", "tuning", "decoding")) -> List[dict]:
    """Mean, sample standard deviation (None for a single run) and run count per group."""
    if not results:
        raise ValueError("nothing to aggregate")
    groups: Dict[tuple, List[float]] = {}
    for r in results:
        key = tuple(getattr(r, g) for g in group_by)
        groups.setdefault(key, []).append(float(r.accuracy))
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        vals = groups[key]
        n = len(vals)
        mean = math.fsum(vals) / n
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else None
        rows.append({**dict(zip(group_by, key)), "mean": mean, "std": std, "n": n})
    return rows


def write_results_csv(results: Sequence[RunResult], path) -> None:
    rows = sorted((r.row() for r in results), key=lambda d: (d["domain"], d["scheme"], d["tuning"], d["decoding"], int(d["seed"])))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_results_csv(path) -> List[RunResult]:
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            n = int(row["n"])
            out.append(RunResult(row["domain"], row["scheme"], row["tuning"], row["decoding"], int(row["seed"]), n,
                                 int(round(float(row["accuracy"]) * n))))
    return out


def write_aggregate_csv(rows: Sequence[dict], path, group_by: Sequence[str] = ("domain", "scheme", "tuning", "decoding")) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(group_by) + ["mean", "std", "n"])
        for r in rows:
            std = "" if r["std"] is None else f"{r['std']:.4f}"
            writer.writerow([r[g] for g in group_by] + [f"{r['mean']:.4f}", std, r["n"]])
