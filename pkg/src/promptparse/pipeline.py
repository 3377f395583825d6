"""End-to-end experiment runner: sample, canonicalize, train, decode, evaluate."""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .canonicalize import CanonScheme, LabelTable, apply_scheme, dataset_label_table
from .datasets import Dataset, load_dataset, overnight_split, save_jsonl, spis_split, write_split_meta
from .evaluate import RunResult, aggregate, exact_match, write_aggregate_csv, write_results_csv
from .meaning_repr import ParseError, normalize_ws, parse_top
from .plotting import render_report
from .prompt_lm import ModelConfig, ModelScorer, init_model, save_checkpoint, train
from .prompt_lm.model import Model
from .prompt_lm.train import MODES, TrainConfig
from .synthetic import PRESETS, SynthGrammarConfig, gen_synthetic
from .tokenizer import Vocabulary, add_atomic_token, build_vocab, decode, encode, save_vocab, strip_atomic
from .trie_decoder import Trie, build_trie, constrained_beam_search, save_trie, unconstrained_beam_search

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PROMPTPARSE_OUTPUT_ROOT"
DECODING_MODES = ("constrained", "unconstrained")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: Dict = field(default_factory=lambda: {"synthetic": {"preset": "weather", "n": 1000, "seed": 0}})
    target: str = "meaning"
    sampling: Dict = field(default_factory=lambda: {"method": "overnight", "n_train": 200, "val_frac": 0.2})
    schemes: List[str] = field(default_factory=lambda: ["none"])
    tuning: List[str] = field(default_factory=lambda: ["finetune"])
    model: Dict = field(default_factory=dict)
    train: Dict = field(default_factory=dict)
    decoding: List[str] = field(default_factory=lambda: list(DECODING_MODES))
    beam_width: int = 10
    trie_source: str = "all"
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: Optional[str] = None
    figures: bool = True

    @classmethod
    def from_dict(cls, raw: Dict, base_dir: str = ".") -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(raw))
        path = cfg.dataset.get("path")
        if path is not None and not os.path.isabs(path):
            cfg.dataset["path"] = os.path.normpath(os.path.join(base_dir, path))
        if cfg.output_dir is not None and not os.path.isabs(cfg.output_dir):
            cfg.output_dir = os.path.normpath(os.path.join(base_dir, cfg.output_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        return cls.from_dict(raw, os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> Dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if ("path" in self.dataset) == ("synthetic" in self.dataset):
            raise ConfigError("dataset needs exactly one of 'path' or 'synthetic'")
        if "path" in self.dataset and not os.path.exists(self.dataset["path"]):
            raise ConfigError(f"dataset file {self.dataset['path']} does not exist")
        if self.target not in ("meaning", "canonical"):
            raise ConfigError("target must be 'meaning' or 'canonical'")
        if self.sampling.get("method") not in ("overnight", "spis"):
            raise ConfigError("sampling.method must be 'overnight' or 'spis'")
        for s in self.schemes:
            CanonScheme.from_name(s)
            if self.target == "canonical" and CanonScheme.from_name(s).variant != "none":
                raise ConfigError("canonical-form targets only support scheme 'none'")
        for t in self.tuning:
            if t not in MODES:
                raise ConfigError(f"tuning mode {t!r} not in {MODES}")
        for d in self.decoding:
            if d not in DECODING_MODES:
                raise ConfigError(f"decoding mode {d!r} not in {DECODING_MODES}")
        if self.trie_source not in ("all", "train"):
            raise ConfigError("trie_source must be 'all' or 'train'")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")

    def resolved_output_dir(self) -> str:
        return self.output_dir or os.path.join(default_output_root(), self.name)


class _stage:
    """Re-raise any failure inside the block as a :class:`StageError`."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def load_source(cfg: ExperimentConfig) -> Dataset:
    if "path" in cfg.dataset:
        return load_dataset(cfg.dataset["path"])
    spec = dict(cfg.dataset["synthetic"])
    preset = spec.pop("preset", "weather")
    n = spec.pop("n", 1000)
    seed = spec.pop("seed", 0)
    base = PRESETS[preset].to_dict()
    base.update(spec)
    return gen_synthetic(SynthGrammarConfig(**base), n, seed)


def split_dataset(cfg: ExperimentConfig, data: Dataset, seed: int):
    s = cfg.sampling
    if s["method"] == "overnight":
        return overnight_split(data, s.get("n_train", 200), s.get("val_frac", 0.2), seed)
    return spis_split(data, s["k"], s.get("val_frac", 0.2), s.get("test_frac", 0.3), seed)


def make_target(ex, scheme: CanonScheme, table: Optional[LabelTable], target: str = "meaning") -> str:
    if target == "canonical":
        if ex.canonical is None:
            raise ConfigError(f"example {ex.utterance!r} has no canonical form")
        return normalize_ws(ex.canonical)
    try:
        tree = parse_top(ex.meaning)
    except ParseError:
        if scheme.variant == "none":
            return normalize_ws(ex.meaning)
        raise
    return apply_scheme(tree, scheme, table)


def gold_of(ex, target: str) -> str:
    return ex.canonical if target == "canonical" else ex.meaning


def build_run_vocab(texts: Sequence[str], table: Optional[LabelTable]) -> Tuple[Vocabulary, List[str]]:
    """Word vocabulary over ``texts``; label surfaces stay out so they can be
    registered as atomic tokens after the model is initialized."""
    atomic = table.atomic_tokens if table is not None else []
    vocab = build_vocab(strip_atomic(t, atomic) for t in texts)
    return vocab, atomic


def decode_split(model: Model, vocab: Vocabulary, sources, mode: str, trie: Optional[Trie], beam_width: int, max_len: int) -> List[str]:
    scorer = ModelScorer(model)
    preds = []
    for src in sources:
        if mode == "constrained":
            hyps = constrained_beam_search(scorer, trie, src, beam_width)
        else:
            hyps = unconstrained_beam_search(scorer, src, beam_width, max_len, model.config.vocab_size)
        preds.append(decode(vocab, hyps[0][0]) if hyps else "")
    return preds


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_lines(lines, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[str] = None) -> Tuple[List[RunResult], str]:
    out = output_dir or cfg.resolved_output_dir()
    os.makedirs(out, exist_ok=True)
    _write_json(cfg.to_dict(), os.path.join(out, "config.json"))
    results: List[RunResult] = []
    histories: Dict[str, List[dict]] = {}

    with _stage("load"):
        data = load_source(cfg)
        domain = data.examples[0].domain if data.examples else ""

    for seed in cfg.seeds:
        with _stage(f"sample[seed={seed}]"):
            splits = split_dataset(cfg, data, seed)
            split_dir = os.path.join(out, "splits", f"seed{seed}")
            os.makedirs(split_dir, exist_ok=True)
            for part in splits:
                save_jsonl(part, os.path.join(split_dir, f"{part.split}.jsonl"))
                write_split_meta(part, os.path.join(split_dir, f"{part.split}.meta.json"))
        train_set, val_set, test_set = splits

        for scheme_name in cfg.schemes:
            scheme = CanonScheme.from_name(scheme_name)
            for mode in cfg.tuning:
                tag = f"{scheme.name}/{mode}/seed{seed}"
                run_dir = os.path.join(out, "runs", scheme.name, mode, f"seed{seed}")
                os.makedirs(run_dir, exist_ok=True)
                rows, hist = _run_single(cfg, data, splits, scheme, mode, seed, run_dir, domain)
                results.extend(rows)
                histories[tag] = hist
                # partial results survive a later failure
                write_results_csv(results, os.path.join(out, "results.csv"))

    with _stage("aggregate"):
        rows = aggregate(results)
        write_aggregate_csv(rows, os.path.join(out, "aggregate.csv"))
    if cfg.figures:
        with _stage("report"):
            render_report(out, rows, histories)
    return results, out


def _run_single(cfg, data, splits, scheme, mode, seed, run_dir, domain):
    train_set, val_set, test_set = splits
    target = cfg.target
    with _stage(f"canonicalize[{scheme.name}]"):
        table = None
        if scheme.needs_table:
            table = dataset_label_table((parse_top(ex.meaning) for ex in data), scheme)
            table.save(os.path.join(run_dir, "label_table.tsv"))
        all_targets = [make_target(ex, scheme, table, target) for ex in data]
        targets = {
            part.split: [make_target(ex, scheme, table, target) for ex in part]
            for part in splits
        }

    with _stage("vocab"):
        vocab, atomic = build_run_vocab([ex.utterance for ex in data] + all_targets, table)

    with _stage(f"train[{mode}]"):
        mcfg = ModelConfig(vocab_size=len(vocab), **{**cfg.model, "seed": seed})
        model = init_model(mcfg, vocab)
        for surface in atomic:
            add_atomic_token(vocab, surface)
        model.add_token_rows(len(atomic))
        save_vocab(vocab, os.path.join(run_dir, "vocab.txt"))

        def pairs(part):
            return [(encode(vocab, ex.utterance), encode(vocab, t)) for ex, t in zip(part, targets[part.split])]

        train_pairs, val_pairs = pairs(train_set), pairs(val_set)
        tcfg = TrainConfig(**{**cfg.train, "mode": mode, "seed": seed})
        best, history = train(model, train_pairs, val_pairs, tcfg)
        save_checkpoint(best, os.path.join(run_dir, "model.ckpt"), extra={"train": tcfg.to_dict()})
        _write_json(history, os.path.join(run_dir, "history.json"))

    with _stage("build-trie"):
        trie_targets = all_targets if cfg.trie_source == "all" else targets["train"]
        trie = build_trie(encode(vocab, t) for t in trie_targets)
        save_trie(trie, os.path.join(run_dir, "trie.txt"))

    rows = []
    sources = [encode(vocab, ex.utterance) for ex in test_set]
    golds = [gold_of(ex, target) for ex in test_set]
    max_len = min(tcfg.max_decode_len, best.config.max_len - 1)
    for decoding in cfg.decoding:
        with _stage(f"decode[{decoding}]"):
            preds = decode_split(best, vocab, sources, decoding, trie, cfg.beam_width, max_len)
            _write_lines(preds, os.path.join(run_dir, f"predictions.{decoding}.txt"))
        with _stage(f"eval[{decoding}]"):
            _, flags = exact_match(preds, golds, scheme, table)
            rows.append(RunResult(domain, scheme.name, mode, decoding, seed, len(flags), sum(flags)))
    return rows, history
