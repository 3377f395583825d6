"""Toy pre-LN transformer encoder-decoder with a trainable soft prompt.

Parameters are split into two partitions: ``prompt`` (the K x d matrix of
continuous prompt embeddings prepended to the encoder input) and ``backbone``
(everything else, including the token embeddings).  Prompt rows carry no
positional embedding.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..tokenizer import BOS, EOS, PAD, UNK
from . import autograd as ag
from .autograd import Tensor

PROMPT = "prompt"
BACKBONE = "backbone"


class SequenceTooLong(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_len: int = 64
    prompt_len: int = 20
    seed: int = 0
    init_std: float = 0.02
    dropout: float = 0.2  # only active inside training steps

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be >= 0")
        if self.vocab_size <= UNK:
            raise ValueError("vocabulary must hold at least the reserved tokens")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def to_dict(self):
        return asdict(self)


def _attn_shapes(prefix, d):
    return [
        (f"{prefix}.wq", (d, d)), (f"{prefix}.bq", (d,)),
        # no key bias: it shifts every score of a query equally, so softmax ignores it
        (f"{prefix}.wk", (d, d)),
        (f"{prefix}.wv", (d, d)), (f"{prefix}.bv", (d,)),
        (f"{prefix}.wo", (d, d)), (f"{prefix}.bo", (d,)),
    ]


def _ln_shapes(prefix, d):
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def _ffn_shapes(prefix, d, f):
    return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) list; the order fixes the initialization stream."""
    d, f, V, L = config.d_model, config.d_ff, config.vocab_size, config.max_len
    shapes = [("embed.tokens", (V, d)), ("embed.enc_pos", (L, d)), ("embed.dec_pos", (L, d))]
    for i in range(config.n_enc_layers):
        p = f"encoder.{i}"
        shapes += _ln_shapes(f"{p}.ln_attn", d) + _attn_shapes(f"{p}.self_attn", d)
        shapes += _ln_shapes(f"{p}.ln_ffn", d) + _ffn_shapes(f"{p}.ffn", d, f)
    shapes += _ln_shapes("encoder.ln_out", d)
    for i in range(config.n_dec_layers):
        p = f"decoder.{i}"
        shapes += _ln_shapes(f"{p}.ln_self", d) + _attn_shapes(f"{p}.self_attn", d)
        shapes += _ln_shapes(f"{p}.ln_cross", d) + _attn_shapes(f"{p}.cross_attn", d)
        shapes += _ln_shapes(f"{p}.ln_ffn", d) + _ffn_shapes(f"{p}.ffn", d, f)
    shapes += _ln_shapes("decoder.ln_out", d)
    # the output projection reuses the token embeddings; only its bias is separate
    shapes += [("output.b", (V,))]
    if config.prompt_len:
        shapes.append((PROMPT, (config.prompt_len, d)))
    return shapes


def partition_of(name: str) -> str:
    return PROMPT if name == PROMPT else BACKBONE


def parameter_group(name: str) -> str:
    """Coarse grouping used in gradient-check reports."""
    if name == PROMPT:
        return PROMPT
    head = name.split(".")[0]
    if head in ("encoder", "decoder") and name.split(".")[1].isdigit():
        return f"{head}.{name.split('.')[1]}"
    return head


class Model:
    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        self.config = config
        self.params: Dict[str, Tensor] = {k: Tensor(v) for k, v in params.items()}
        self._drop_rng: Optional[np.random.Generator] = None

    # -- parameter bookkeeping --------------------------------------------

    def names(self, partition: Optional[str] = None) -> List[str]:
        return [k for k in self.params if partition in (None, "all") or partition_of(k) == partition]

    def num_parameters(self, partition: Optional[str] = None) -> int:
        return sum(self.params[k].data.size for k in self.names(partition))

    def state(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=ag.DTYPE)

    def copy(self) -> "Model":
        return Model(copy.deepcopy(self.config), self.state())

    def without_prompt(self) -> "Model":
        cfg = copy.deepcopy(self.config)
        cfg.prompt_len = 0
        return Model(cfg, {k: v for k, v in self.state().items() if k != PROMPT})

    def set_trainable(self, partition: str) -> None:
        for k, t in self.params.items():
            t.requires_grad = partition == "all" or partition_of(k) == partition
            t.grad = None

    def add_token_rows(self, n: int, rng: Optional[np.random.Generator] = None) -> None:
        """Grow the vocabulary by ``n`` freshly initialized tokens."""
        if n <= 0:
            return
        if rng is None:
            rng = np.random.default_rng([self.config.seed, self.config.vocab_size])
        std = self.config.init_std
        d = self.config.d_model
        emb = self.params["embed.tokens"].data
        self.params["embed.tokens"].data = np.vstack([emb, rng.normal(0.0, std, (n, d))])
        self.params["output.b"].data = np.concatenate([self.params["output.b"].data, np.zeros(n)])
        self.config.vocab_size += n

    # -- forward --------------------------------------------------------------

    def _p(self, name) -> Tensor:
        return self.params[name]

    def _dropout(self, x: Tensor) -> Tensor:
        p = self.config.dropout
        if self._drop_rng is None or p == 0.0:
            return x
        mask = (self._drop_rng.random(x.shape) >= p) / (1.0 - p)
        return ag.mul(x, Tensor(mask))

    def _attention(self, prefix, x_q, x_kv, keep) -> Tensor:
        cfg = self.config
        B, Tq, d = x_q.shape
        Tk = x_kv.shape[1]
        h = cfg.n_heads
        dh = d // h

        def heads(t, T):
            return ag.transpose(ag.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

        q = heads(ag.linear(x_q, self._p(f"{prefix}.wq"), self._p(f"{prefix}.bq")), Tq)
        k = heads(ag.linear(x_kv, self._p(f"{prefix}.wk")), Tk)
        v = heads(ag.linear(x_kv, self._p(f"{prefix}.wv"), self._p(f"{prefix}.bv")), Tk)
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = ag.masked_softmax(scores, keep)
        ctx = ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3))
        ctx = ag.reshape(ctx, (B, Tq, d))
        return ag.linear(ctx, self._p(f"{prefix}.wo"), self._p(f"{prefix}.bo"))

    def _ln(self, prefix, x) -> Tensor:
        return ag.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    def _ffn(self, prefix, x) -> Tensor:
        hdn = ag.gelu(ag.linear(x, self._p(f"{prefix}.w1"), self._p(f"{prefix}.b1")))
        return ag.linear(hdn, self._p(f"{prefix}.w2"), self._p(f"{prefix}.b2"))

    def encode(self, src: np.ndarray, src_keep: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """Encode a padded (B, S) id batch; returns memory and its key mask."""
        cfg = self.config
        B, S = src.shape
        if S > cfg.max_len:
            raise SequenceTooLong(f"source length {S} exceeds max_len {cfg.max_len}")
        x = ag.add(ag.embedding(self._p("embed.tokens"), src), _slice_rows(self._p("embed.enc_pos"), S))
        x = self._dropout(x)
        keep = src_keep
        if cfg.prompt_len:
            K = cfg.prompt_len
            prompt = ag.broadcast(self._p(PROMPT), (B, K, cfg.d_model))
            x = ag.concat([prompt, x], axis=1)
            keep = np.concatenate([np.ones((B, K), dtype=bool), src_keep], axis=1)
        attn_keep = keep[:, None, None, :]
        for i in range(cfg.n_enc_layers):
            x = self._enc_block(f"encoder.{i}", x, attn_keep)
        return self._ln("encoder.ln_out", x), keep

    def _enc_block(self, p, x, attn_keep):
        hdn = self._ln(f"{p}.ln_attn", x)
        x = ag.add(x, self._dropout(self._attention(f"{p}.self_attn", hdn, hdn, attn_keep)))
        return ag.add(x, self._dropout(self._ffn(f"{p}.ffn", self._ln(f"{p}.ln_ffn", x))))

    def decode(self, tgt_in: np.ndarray, memory: Tensor, mem_keep: np.ndarray) -> Tensor:
        """Next-token logits (B, T, V) for decoder inputs ``tgt_in`` (BOS-prefixed)."""
        cfg = self.config
        B, T = tgt_in.shape
        if T > cfg.max_len:
            raise SequenceTooLong(f"target length {T} exceeds max_len {cfg.max_len}")
        y = ag.add(ag.embedding(self._p("embed.tokens"), tgt_in), _slice_rows(self._p("embed.dec_pos"), T))
        y = self._dropout(y)
        causal = np.tril(np.ones((T, T), dtype=bool))
        self_keep = causal[None, None, :, :] & (tgt_in != PAD)[:, None, None, :]
        # a row can lose every key only at PAD queries, whose outputs are ignored;
        # the diagonal keeps them finite
        self_keep = self_keep | np.eye(T, dtype=bool)[None, None]
        cross_keep = mem_keep[:, None, None, :]
        for i in range(cfg.n_dec_layers):
            p = f"decoder.{i}"
            hdn = self._ln(f"{p}.ln_self", y)
            y = ag.add(y, self._dropout(self._attention(f"{p}.self_attn", hdn, hdn, self_keep)))
            cross = self._attention(f"{p}.cross_attn", self._ln(f"{p}.ln_cross", y), memory, cross_keep)
            y = ag.add(y, self._dropout(cross))
            y = ag.add(y, self._dropout(self._ffn(f"{p}.ffn", self._ln(f"{p}.ln_ffn", y))))
        y = self._ln("decoder.ln_out", y)
        return ag.linear(y, ag.transpose(self._p("embed.tokens"), (1, 0)), self._p("output.b"))


def _slice_rows(t: Tensor, n: int) -> Tensor:
    return ag.reshape(_rows(t, n), (n, t.shape[1]))


def _rows(t: Tensor, n: int) -> Tensor:
    return ag.embedding(t, np.arange(n))


# -- construction ---------------------------------------------------------

def init_model(config: ModelConfig, vocab=None) -> Model:
    """Seeded initialization: weights ~ N(0, init_std^2), biases 0, layer-norm gains 1.

    Each prompt row starts as a copy of a uniformly chosen (non-reserved when
    possible) token embedding.
    """
    if vocab is not None and len(vocab) != config.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} entries, config says {config.vocab_size}")
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config):
        if name == PROMPT:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, config.init_std, shape)
    if config.prompt_len:
        V = config.vocab_size
        low = UNK + 1 if V > UNK + 1 else 0
        rows = rng.integers(low, V, size=config.prompt_len)
        params[PROMPT] = params["embed.tokens"][rows].copy()
    return Model(config, params)


# -- batching -------------------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], prefix: Sequence[int] = (), suffix: Sequence[int] = ()) -> np.ndarray:
    rows = [list(prefix) + list(s) + list(suffix) for s in seqs]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def source_batch(sources: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Sources are EOS-terminated so that even an empty source has one position."""
    src = pad_batch(sources, suffix=(EOS,))
    keep = np.zeros(src.shape, dtype=bool)
    for i, s in enumerate(sources):
        keep[i, : len(s) + 1] = True
    return src, keep


def teacher_forcing_batch(targets: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decoder inputs (BOS + y), labels (y + EOS) and a loss weight mask."""
    tgt_in = pad_batch(targets, prefix=(BOS,))
    labels = pad_batch(targets, suffix=(EOS,))
    weights = np.zeros(labels.shape)
    for i, t in enumerate(targets):
        weights[i, : len(t) + 1] = 1.0
    return tgt_in, labels, weights


def batch_loss(model: Model, batch: Sequence[Tuple[Sequence[int], Sequence[int]]], dropout_rng=None) -> Tensor:
    """Teacher-forced loss; dropout masks are drawn from ``dropout_rng`` when given."""
    sources = [s for s, _ in batch]
    targets = [t for _, t in batch]
    src, src_keep = source_batch(sources)
    tgt_in, labels, weights = teacher_forcing_batch(targets)
    model._drop_rng = dropout_rng
    try:
        memory, mem_keep = model.encode(src, src_keep)
        logits = model.decode(tgt_in, memory, mem_keep)
    finally:
        model._drop_rng = None
    return ag.cross_entropy(logits, labels, weights)


def forward_logprobs(model: Model, source: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    """Log-probabilities of the next target token after ``prefix``."""
    with ag.no_grad():
        src, keep = source_batch([source])
        memory, mem_keep = model.encode(src, keep)
        tgt_in = np.array([[BOS] + list(prefix)], dtype=np.int64)
        logits = model.decode(tgt_in, memory, mem_keep)
    return ag.log_softmax(logits.data[0, -1])


def loss_and_gradients(model: Model, batch, partition: str = "all", dropout_rng=None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean token NLL with teacher forcing and gradients for one partition.

    ``partition`` is ``"prompt"`` (prompt tuning) or ``"all"`` (fine-tuning).
    Returned gradients only cover the selected partition.  Without
    ``dropout_rng`` the loss is the deterministic (dropout-free) one.
    """
    if not batch:
        raise ValueError("empty batch")
    model.set_trainable(partition)
    loss = batch_loss(model, batch, dropout_rng)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss became {value}")
    loss.backward()
    grads = {}
    for name in model.names(partition):
        t = model.params[name]
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return value, grads


class ModelScorer:
    """Adapts a model to the beam-search scorer interface, caching the encoding."""

    def __init__(self, model: Model):
        self.model = model
        self._key = None
        self._memory = None

    def _encode(self, source):
        key = tuple(source)
        if key != self._key:
            with ag.no_grad():
                src, keep = source_batch([list(source)])
                self._memory = self.model.encode(src, keep)
            self._key = key
        return self._memory

    def __call__(self, source, prefix) -> np.ndarray:
        return self.score_batch(source, [prefix])[0]

    def score_batch(self, source, prefixes) -> np.ndarray:
        memory, keep = self._encode(source)
        n = len(prefixes)
        width = max(len(p) for p in prefixes) + 1
        if any(len(p) + 1 != width for p in prefixes):
            # mixed lengths only arise outside beam search; score one at a time
            return np.stack([self.score_batch(source, [p])[0] for p in prefixes])
        tgt_in = np.array([[BOS] + list(p) for p in prefixes], dtype=np.int64)
        with ag.no_grad():
            mem = ag.broadcast(memory, (n,) + memory.shape[1:])
            logits = self.model.decode(tgt_in, mem, np.broadcast_to(keep, (n, keep.shape[1])))
        return ag.log_softmax(logits.data[:, -1])


def greedy_decode(model: Model, sources: Sequence[Sequence[int]], max_len: int, batch_size: int = 256) -> List[List[int]]:
    """Batched greedy decoding; returns id sequences without BOS/EOS."""
    out: List[List[int]] = []
    for start in range(0, len(sources), batch_size):
        chunk = sources[start : start + batch_size]
        with ag.no_grad():
            src, keep = source_batch(chunk)
            memory, mem_keep = model.encode(src, keep)
            B = len(chunk)
            seqs = np.full((B, 1), BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            limit = min(max_len, model.config.max_len - 1)
            for _ in range(limit + 1):
                logits = model.decode(seqs, memory, mem_keep).data[:, -1]
                nxt = logits.argmax(axis=-1)
                nxt[done] = PAD
                done |= nxt == EOS
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                if done.all() or seqs.shape[1] > limit:
                    break
        for row in seqs[:, 1:]:
            toks = []
            for t in row:
                if t in (EOS, PAD):
                    break
                toks.append(int(t))
            out.append(toks)
    return out
