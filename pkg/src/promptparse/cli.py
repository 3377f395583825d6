"""Command-line entry point.

Every failure is reported on stderr as one line,
``promptparse: error: <ErrorKind>: <message>``, with a nonzero exit status.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

from . import __version__
from .canonicalize import CanonScheme, LabelTable, apply_scheme, dataset_label_table
from .datasets import Dataset, Example, load_dataset, overnight_split, save_jsonl, spis_sample, spis_split, write_split_meta
from .evaluate import RunResult, aggregate, exact_match, read_results_csv, write_aggregate_csv, write_results_csv
from .meaning_repr import ParseError, parse_top
from .pipeline import ConfigError, ExperimentConfig, build_run_vocab, decode_split, make_target, run_experiment
from .plotting import render_report
from .prompt_lm import ModelConfig, ModelScorer, grad_check, init_model, load_checkpoint, save_checkpoint, train
from .prompt_lm.gradcheck import random_example, tiny_config
from .prompt_lm.train import MODES, TrainConfig
from .synthetic import PRESETS, SynthGrammarConfig, gen_synthetic
from .tokenizer import add_atomic_token, decode, encode, load_vocab, save_vocab
from .trie_decoder import build_trie, constrained_beam_search, load_trie, save_trie, unconstrained_beam_search

PROG = "promptparse"
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Raised for failures that have no more specific error type."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report("UsageError", message)
        sys.exit(EXIT_USAGE)


def _report(kind: str, message: str) -> None:
    # keep the line machine-parseable even when the message spans lines
    message = " ".join(str(message).split())
    print(f"{PROG}: error: {kind}: {message}", file=sys.stderr)


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_lines(lines: Sequence[str], path) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def _scheme_from_args(args) -> CanonScheme:
    return CanonScheme(args.scheme, shorten_labels=args.shorten, with_simplify=args.simplify)


def _add_scheme_flags(p) -> None:
    p.add_argument("--scheme", default="none", choices=["none", "simplify", "outofvocab", "invocab"])
    p.add_argument("--shorten", action="store_true", help="strip the IN:/SL: prefix and lowercase labels")
    p.add_argument("--simplify", action="store_true", help="simplify before label substitution")


def _read_sources(path) -> List[str]:
    """Utterances from a dataset file (.jsonl/.tsv) or a plain one-per-line text file."""
    if path.endswith((".jsonl", ".tsv")):
        return [ex.utterance for ex in load_dataset(path)]
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def _read_targets(path, field: str = "meaning") -> List[str]:
    if path.endswith((".jsonl", ".tsv")):
        out = []
        for ex in load_dataset(path):
            value = ex.canonical if field == "canonical" else ex.meaning
            if value is None:
                raise CliError("MissingField", f"{path}: example {ex.utterance!r} has no {field}")
            out.append(value)
        return out
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> int:
    base = PRESETS[args.preset].to_dict()
    for key in ("n_intents", "n_slots", "nesting_prob", "values_per_slot"):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    data = gen_synthetic(SynthGrammarConfig(**base), args.n, args.seed)
    _ensure_parent(args.out)
    save_jsonl(data, args.out)
    write_split_meta(data, os.path.splitext(args.out)[0] + ".meta.json")
    print(f"wrote {len(data)} examples to {args.out}")
    return 0


def cmd_sample(args) -> int:
    data = load_dataset(args.input)
    data.meta.setdefault("source", os.path.abspath(args.input))
    os.makedirs(args.out_dir, exist_ok=True)
    if args.method == "overnight":
        parts = overnight_split(data, args.n_train, args.val_frac, args.seed)
    elif args.method == "spis":
        if args.k is None:
            raise CliError("UsageError", "--k is required for SPIS sampling")
        parts = spis_split(data, args.k, args.val_frac, args.test_frac, args.seed)
    else:
        if args.k is None:
            raise CliError("UsageError", "--k is required for SPIS sampling")
        parts = (spis_sample(data, args.k, args.seed),)
    for part in parts:
        path = os.path.join(args.out_dir, f"{part.split}.jsonl")
        save_jsonl(part, path)
        write_split_meta(part, os.path.join(args.out_dir, f"{part.split}.meta.json"))
        print(f"{part.split}: {len(part)} examples -> {path}")
    return 0


def cmd_canonicalize(args) -> int:
    data = load_dataset(args.input)
    scheme = _scheme_from_args(args)
    if scheme.needs_table and not args.table:
        raise CliError("UsageError", f"scheme {scheme.name} needs --table for the label table")
    trees = []
    if scheme.variant != "none":
        for lineno, ex in enumerate(data, 1):
            try:
                trees.append(parse_top(ex.meaning))
            except ParseError as e:
                raise CliError(type(e).__name__, f"{args.input}:{lineno}: {e}") from e
    table = dataset_label_table(trees, scheme) if scheme.needs_table else None
    out = []
    for lineno, (ex, tree) in enumerate(zip(data, trees or [None] * len(data)), 1):
        if tree is None:
            out.append(ex)  # the identity scheme leaves meanings byte-for-byte alone
            continue
        try:
            target = apply_scheme(tree, scheme, table)
        except Exception as e:
            raise CliError(type(e).__name__, f"{args.input}:{lineno}: {e}") from e
        out.append(Example(ex.utterance, target, ex.canonical, ex.domain))
    _ensure_parent(args.out)
    save_jsonl(Dataset(out, data.split, {**data.meta, "scheme": scheme.name}), args.out)
    if table is not None:
        _ensure_parent(args.table)
        table.save(args.table)
    print(f"wrote {len(out)} examples ({scheme.name}) to {args.out}")
    return 0


def cmd_build_trie(args) -> int:
    vocab = load_vocab(args.vocab)
    targets = _read_targets(args.targets, args.field)
    if not targets:
        raise CliError("EmptySequence", f"{args.targets} has no targets")
    trie = build_trie(encode(vocab, t) for t in targets)
    _ensure_parent(args.out)
    save_trie(trie, args.out)
    print(f"trie with {trie.size} sequences -> {args.out}")
    return 0


def _targets_for(data: Dataset, scheme: CanonScheme, table: Optional[LabelTable], field: str) -> List[str]:
    return [make_target(ex, scheme, table, field) for ex in data]


def cmd_train(args) -> int:
    train_set = load_dataset(args.train, "train")
    val_set = load_dataset(args.val, "val")
    scheme = _scheme_from_args(args)
    pool = list(train_set) + list(val_set)
    for extra in args.vocab_from or []:
        pool += list(load_dataset(extra))
    table = None
    if scheme.needs_table:
        table = dataset_label_table((parse_top(ex.meaning) for ex in pool), scheme)
    os.makedirs(args.out_dir, exist_ok=True)
    pool_targets = _targets_for(Dataset(pool), scheme, table, args.target)
    vocab, atomic = build_run_vocab([ex.utterance for ex in pool] + pool_targets, table)

    model_kw = {k: getattr(args, k) for k in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "max_len", "prompt_len")
                if getattr(args, k) is not None}
    model = init_model(ModelConfig(vocab_size=len(vocab), seed=args.seed, **model_kw), vocab)
    for surface in atomic:
        add_atomic_token(vocab, surface)
    model.add_token_rows(len(atomic))

    def pairs(part):
        return [(encode(vocab, ex.utterance), encode(vocab, t)) for ex, t in zip(part, _targets_for(part, scheme, table, args.target))]

    train_kw = {k: getattr(args, k) for k in ("lr", "batch_size", "max_epochs", "patience", "eval_interval") if getattr(args, k) is not None}
    tcfg = TrainConfig(mode=args.mode, seed=args.seed, **train_kw)
    best, history = train(model, pairs(train_set), pairs(val_set), tcfg)

    save_vocab(vocab, os.path.join(args.out_dir, "vocab.txt"))
    if table is not None:
        table.save(os.path.join(args.out_dir, "label_table.tsv"))
    save_checkpoint(best, os.path.join(args.out_dir, "model.ckpt"), extra={"train": tcfg.to_dict(), "scheme": scheme.name})
    with open(os.path.join(args.out_dir, "history.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(history, f, indent=2, sort_keys=True)
        f.write("\n")
    best_em = max(h["val_em"] for h in history)
    print(f"best validation exact match {best_em:.4f}; artifacts in {args.out_dir}")
    return 0


def cmd_decode(args) -> int:
    for path in (args.model, args.vocab) + ((args.trie,) if not args.unconstrained else ()):
        if path is None:
            raise CliError("MissingArtifact", "constrained decoding needs --trie (or pass --unconstrained)")
        if not os.path.exists(path):
            raise CliError("MissingArtifact", f"{path} does not exist")
    model = load_checkpoint(args.model)
    vocab = load_vocab(args.vocab)
    if len(vocab) != model.config.vocab_size:
        raise CliError("VocabMismatch", f"vocabulary has {len(vocab)} entries, model expects {model.config.vocab_size}")
    trie = None if args.unconstrained else load_trie(args.trie)
    sources = [encode(vocab, s) for s in _read_sources(args.input)]
    max_len = args.max_len if args.max_len is not None else model.config.max_len - 1
    scorer = ModelScorer(model)
    lines = []
    if args.top_k <= 1:
        mode = "unconstrained" if args.unconstrained else "constrained"
        lines = decode_split(model, vocab, sources, mode, trie, args.beam, max_len)
    else:
        for src in sources:
            if args.unconstrained:
                hyps = unconstrained_beam_search(scorer, src, args.beam, max_len, model.config.vocab_size)
            else:
                hyps = constrained_beam_search(scorer, trie, src, args.beam)
            lines.append(json.dumps([[decode(vocab, ids), round(lp, 6)] for ids, lp in hyps[: args.top_k]]))
    _write_lines(lines, args.out)
    print(f"decoded {len(lines)} inputs -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    with open(args.pred, encoding="utf-8") as f:
        preds = [line.rstrip("\n") for line in f]
    golds = _read_targets(args.gold, args.field)
    scheme = _scheme_from_args(args)
    table = LabelTable.load(args.table, scheme.variant) if args.table else None
    if scheme.needs_table and table is None:
        raise CliError("UsageError", f"scheme {scheme.name} needs --table")
    _, flags = exact_match(preds, golds, scheme, table)
    result = RunResult(args.domain, scheme.name, args.tuning, args.decoding, args.seed, len(flags), sum(flags))
    if args.out:
        existing = read_results_csv(args.out) if os.path.exists(args.out) else []
        write_results_csv(existing + [result], args.out)
    print(f"exact match {float(result.accuracy):.4f} ({result.n_correct}/{result.n})")
    return 0


def _config_override(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise CliError("UsageError", f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def cmd_experiment(args) -> int:
    with open(args.config, encoding="utf-8") as f:
        raw = json.load(f)
    for assignment in args.set or []:
        _config_override(raw, assignment)
    if args.seeds is not None:
        raw["seeds"] = args.seeds
    cfg = ExperimentConfig.from_dict(raw, os.path.dirname(os.path.abspath(args.config)))
    out = args.output_dir
    if out is not None:
        out = os.path.abspath(out)
    results, out = run_experiment(cfg, out)
    for r in sorted(results, key=lambda r: (r.scheme, r.tuning, r.decoding, r.seed)):
        print(f"{r.scheme}\t{r.tuning}\t{r.decoding}\tseed={r.seed}\t{float(r.accuracy):.4f}")
    print(f"results in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = tiny_config(vocab_size=args.vocab_size, prompt_len=args.prompt_len, seed=args.seed,
                      d_model=args.d_model, n_heads=args.n_heads, n_enc_layers=args.layers, n_dec_layers=args.layers)
    example = random_example(cfg, args.seed)
    partitions = ["all", "prompt"] if args.partition == "both" else [args.partition]
    failed = []
    for partition in partitions:
        model = init_model(cfg)
        report = grad_check(model, example, partition, tolerance=args.tolerance, h=args.h)
        print(f"[{partition}] parameters={model.num_parameters(None if partition == 'all' else partition)}")
        for group, err in sorted(report.per_group().items()):
            status = "ok" if err <= args.tolerance else "FAIL"
            print(f"  {group:<12} {err:.3e} {status}")
        print(f"  max relative error {report.max_error:.3e} ({report.worst})")
        if not report.passed:
            failed.append((partition, report))
    if failed:
        detail = "; ".join(f"{p}: {', '.join(sorted({g for g, e in r.per_group().items() if e > args.tolerance}))}"
                           f" (worst {r.worst} {r.max_error:.3e})" for p, r in failed)
        _report("GradCheckFailed", f"tolerance {args.tolerance:g} exceeded in {detail}")
        return EXIT_FAILURE
    return 0


def cmd_report(args) -> int:
    results = read_results_csv(args.results)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.results))
    os.makedirs(out_dir, exist_ok=True)
    rows = aggregate(results)
    write_aggregate_csv(rows, os.path.join(out_dir, "aggregate.csv"))
    histories = {}
    runs_root = args.runs or os.path.join(os.path.dirname(os.path.abspath(args.results)), "runs")
    for path in sorted(glob.glob(os.path.join(runs_root, "*", "*", "*", "history.json"))):
        tag = os.path.relpath(os.path.dirname(path), runs_root).replace(os.sep, "/")
        with open(path, encoding="utf-8") as f:
            histories[tag] = json.load(f)
    for path in render_report(out_dir, rows, histories):
        print(path)
    return 0


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Semantic parsing experiments with constrained decoding and prompt tuning.")
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic TOP dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="weather")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-intents", dest="n_intents", type=int)
    p.add_argument("--n-slots", dest="n_slots", type=int)
    p.add_argument("--nesting-prob", dest="nesting_prob", type=float)
    p.add_argument("--values-per-slot", dest="values_per_slot", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="draw a 200-shot or SPIS split")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=["overnight", "spis", "spis-only"], default="overnight")
    p.add_argument("--n-train", dest="n_train", type=int, default=200)
    p.add_argument("--val-frac", dest="val_frac", type=float, default=0.2)
    p.add_argument("--test-frac", dest="test_frac", type=float, default=0.3)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("canonicalize", help="rewrite meanings under a canonicalization scheme")
    p.add_argument("--input", required=True)
    _add_scheme_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--table", help="label table TSV to write")
    p.set_defaults(func=cmd_canonicalize)

    p = sub.add_parser("build-trie", help="build a prefix trie over target sequences")
    p.add_argument("--targets", required=True, help="dataset file or one target per line")
    p.add_argument("--field", choices=["meaning", "canonical"], default="meaning")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_trie)

    p = sub.add_parser("train", help="train a model (fine-tuning or prompt tuning)")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--vocab-from", dest="vocab_from", nargs="*", help="extra dataset files whose words join the vocabulary")
    p.add_argument("--target", choices=["meaning", "canonical"], default="meaning")
    _add_scheme_flags(p)
    p.add_argument("--mode", choices=MODES, default="finetune")
    p.add_argument("--seed", type=int, default=0)
    for flag in ("d-model", "n-heads", "n-enc-layers", "n-dec-layers", "max-len", "prompt-len", "batch-size",
                 "max-epochs", "patience", "eval-interval"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode utterances with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--trie")
    p.add_argument("--input", required=True)
    p.add_argument("--unconstrained", action="store_true")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--top-k", dest="top_k", type=int, default=1, help="write the k best hypotheses with log-probabilities as JSON")
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="exact match of predictions against gold meanings")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--field", choices=["meaning", "canonical"], default="meaning")
    _add_scheme_flags(p)
    p.add_argument("--table")
    p.add_argument("--domain", default="")
    p.add_argument("--tuning", default="finetune")
    p.add_argument("--decoding", default="constrained")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="results CSV to append the row to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a full experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.max_epochs=50")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--partition", choices=["all", "prompt", "both"], default="both")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--d-model", dest="d_model", type=int, default=8)
    p.add_argument("--n-heads", dest="n_heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=16)
    p.add_argument("--prompt-len", dest="prompt_len", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate a results CSV and render figures")
    p.add_argument("results")
    p.add_argument("--runs", help="directory holding <scheme>/<mode>/<seed>/history.json")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as e:
        _report(e.kind, str(e))
    except ConfigError as e:
        _report("ConfigError", str(e))
    except FileNotFoundError as e:
        _report("FileNotFound", f"{e.filename}: {e.strerror}")
    except Exception as e:  # noqa: BLE001 - the CLI contract is one error line, never a traceback
        _report(type(e).__name__, str(e))
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
