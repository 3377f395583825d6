"""Template grammar producing TOP-annotated utterances.

Every utterance token appears in the meaning representation, as in TOP:
carrier words and slot markers sit directly under the intent, slot values
under their slot.  A slot value can itself be a nested intent phrase, which
is how trees deeper than two levels arise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from .datasets import Dataset, Example

_VERBS = ["GET", "SET", "CREATE", "DELETE", "UPDATE", "CHECK", "FIND", "SHOW", "CANCEL", "ADD", "SNOOZE", "SEND"]
_NOUNS = [
    "WEATHER", "SUNSET", "SUNRISE", "ALARM", "REMINDER", "TODO", "TIMER", "EVENT",
    "FORECAST", "LOCATION", "INFO", "DATE", "RECURRENCE", "MESSAGE", "CONTACT", "TIME",
]
_SLOT_NAMES = [
    "LOCATION", "DATE_TIME", "WEATHER_ATTRIBUTE", "WEATHER_TEMPERATURE_UNIT", "TODO",
    "PERSON_REMINDED", "RECURRING_DATE_TIME", "ORDINAL", "AMOUNT", "METHOD_RETRIEVAL_REMINDER",
    "REMINDER_ATTENDEE", "ATTENDEE_EVENT", "CONTACT", "GROUP", "MUTUAL_EMPLOYER", "FREQUENCY",
    "PERIOD", "DURATION", "EVENT_NAME", "CATEGORY", "NAME_APP", "SOURCE", "DESTINATION",
    "RESOURCE", "TYPE_RELATION", "TIMER_NAME", "TEMPERATURE", "UNIT", "DISTANCE", "ROAD",
    "SUBJECT", "CONTENT",
]
_FILLERS = ["please", "can", "you", "what", "is", "the", "tell", "me", "i", "want", "to", "my", "a"]
_MARKERS = ["in", "for", "at", "on", "about", "with", "from", "by", "near", "around", "until", "every"]
_ONSETS = list("bdfgklmnprstvz")
_VOWELS = list("aeiou")


@dataclass(frozen=True)
class SynthGrammarConfig:
    n_intents: int = 7
    n_slots: int = 11
    nesting_prob: float = 0.0
    max_depth: int = 4
    values_per_slot: int = 5
    max_slots_per_example: int = 3
    templates_per_intent: int = 3
    domain: str = "synthetic"
    grammar_seed: int = 0

    def __post_init__(self):
        if self.n_intents < 1 or self.n_slots < 1:
            raise ValueError("grammar needs at least one intent and one slot")
        if not 0.0 <= self.nesting_prob <= 1.0:
            raise ValueError("nesting_prob must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


WEATHER_LIKE = SynthGrammarConfig(n_intents=7, n_slots=11, nesting_prob=0.0, domain="weather")
REMINDER_LIKE = SynthGrammarConfig(n_intents=19, n_slots=32, nesting_prob=0.12, domain="reminder", grammar_seed=1)
PRESETS = {"weather": WEATHER_LIKE, "reminder": REMINDER_LIKE}


def _label_names(prefix_pool, suffix_pool, n, rng, sep="_"):
    combos = [f"{a}{sep}{b}" for a in prefix_pool for b in suffix_pool]
    picked = rng.choice(len(combos), size=min(n, len(combos)), replace=False)
    names = [combos[i] for i in sorted(picked)]
    i = 0
    while len(names) < n:
        names.append(f"{prefix_pool[0]}{sep}X{i}")
        i += 1
    return names


def _pseudo_words(n, rng, taken):
    words = []
    while len(words) < n:
        syll = int(rng.integers(2, 4))
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syll))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


class SynthGrammar:
    def __init__(self, config: SynthGrammarConfig):
        self.config = config
        rng = np.random.default_rng(config.grammar_seed)
        self.intents = ["IN:" + name for name in _label_names(_VERBS, _NOUNS, config.n_intents, rng)]
        slot_names = list(_SLOT_NAMES)
        while len(slot_names) < config.n_slots:
            slot_names.append(f"SLOT_{len(slot_names)}")
        self.slots = ["SL:" + name for name in slot_names[: config.n_slots]]

        taken = set(_FILLERS) | set(_MARKERS)
        triggers = _pseudo_words(config.n_intents, rng, taken)
        self.templates: Dict[str, List[List[str]]] = {}
        for intent, trig in zip(self.intents, triggers):
            temps = []
            for _ in range(config.templates_per_intent):
                fillers = list(rng.choice(_FILLERS, size=int(rng.integers(0, 3)), replace=False))
                pos = int(rng.integers(0, len(fillers) + 1))
                temps.append(fillers[:pos] + [trig] + fillers[pos:])
            self.templates[intent] = temps

        # every slot belongs to at least one intent
        self.allowed: Dict[str, List[str]] = {i: [] for i in self.intents}
        for j, slot in enumerate(self.slots):
            self.allowed[self.intents[j % len(self.intents)]].append(slot)
        for intent in self.intents:
            extra = int(rng.integers(0, 3))
            for s in rng.choice(self.slots, size=min(extra, len(self.slots)), replace=False):
                if s not in self.allowed[intent]:
                    self.allowed[intent].append(str(s))
            self.allowed[intent].sort()

        self.markers = {s: _MARKERS[int(rng.integers(0, len(_MARKERS)))] for s in self.slots}
        self.values = {s: _pseudo_words(config.values_per_slot, rng, taken) for s in self.slots}

    def ontology(self):
        return set(self.intents) | set(self.slots)

    def _phrase(self, intent, depth, rng) -> Tuple[List[str], str]:
        """Utterance tokens and TOP string for ``intent`` at tree depth ``depth``."""
        cfg = self.config
        temps = self.templates[intent]
        words = list(temps[int(rng.integers(0, len(temps)))])
        parts = ["[" + intent] + words
        allowed = self.allowed[intent]
        n_slots = int(rng.integers(0 if depth > 1 else 1, min(cfg.max_slots_per_example, len(allowed)) + 1))
        for slot in rng.choice(allowed, size=n_slots, replace=False):
            slot = str(slot)
            marker = self.markers[slot]
            words.append(marker)
            parts.append(marker)
            # a nested intent needs two more levels: the slot and the intent
            if depth + 2 <= cfg.max_depth and rng.random() < cfg.nesting_prob:
                sub = self.intents[int(rng.integers(0, len(self.intents)))]
                sub_words, sub_top = self._phrase(sub, depth + 2, rng)
                words.extend(sub_words)
                parts.append(f"[{slot} {sub_top} ]")
            else:
                vals = self.values[slot]
                value = vals[int(rng.integers(0, len(vals)))]
                words.append(value)
                parts.append(f"[{slot} {value} ]")
        parts.append("]")
        return words, " ".join(parts)

    def sample(self, rng) -> Example:
        intent = self.intents[int(rng.integers(0, len(self.intents)))]
        words, top = self._phrase(intent, 1, rng)
        return Example(" ".join(words), top, None, self.config.domain)


def gen_synthetic(grammar: SynthGrammarConfig, n: int, seed: int = 0) -> Dataset:
    g = SynthGrammar(grammar)
    rng = np.random.default_rng(seed)
    examples = [g.sample(rng) for _ in range(n)]
    meta = {"source": "synthetic", "method": "synthetic", "params": grammar.to_dict(), "seed": seed}
    return Dataset(examples, "all", meta)
