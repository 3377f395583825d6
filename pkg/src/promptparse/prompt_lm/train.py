"""Adam training with early stopping on validation exact match."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import PROMPT, Model, greedy_decode, loss_and_gradients

log = logging.getLogger(__name__)

PROMPT_TUNE = "prompt"
FINE_TUNE = "finetune"
MODES = (PROMPT_TUNE, FINE_TUNE)

DEFAULT_LR = {PROMPT_TUNE: 0.3, FINE_TUNE: 1e-3}


@dataclass
class TrainConfig:
    mode: str = FINE_TUNE
    lr: Optional[float] = None  # None -> per-mode default
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 500
    patience: int = 10  # evaluations without improvement
    eval_interval: int = 10  # epochs
    seed: int = 0
    max_decode_len: int = 48

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.mode]
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if self.patience < 1 or self.eval_interval < 1:
            raise ValueError("patience and eval_interval must be positive")

    @property
    def partition(self) -> str:
        return PROMPT if self.mode == PROMPT_TUNE else "all"

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, model: Model, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr:
                p = model.params[name]
                p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


Pair = Tuple[Sequence[int], Sequence[int]]


def greedy_exact_match(model: Model, pairs: Sequence[Pair], max_len: int) -> float:
    preds = greedy_decode(model, [s for s, _ in pairs], max_len)
    hits = sum(list(p) == list(t) for p, (_, t) in zip(preds, pairs))
    return hits / len(pairs)


def train(
    model: Model,
    train_set: Sequence[Pair],
    val_set: Sequence[Pair],
    config: TrainConfig,
    eval_fn: Optional[Callable[[Model], float]] = None,
    max_steps: Optional[int] = None,
) -> Tuple[Model, List[dict]]:
    """Train ``model`` in place and return the best validation snapshot.

    ``history`` has one entry per evaluation: epoch, mean train loss over the
    epochs since the previous evaluation, and validation exact match.
    ``max_steps`` caps the total number of optimizer steps (for tests).
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    if eval_fn is None:
        def eval_fn(m):
            return greedy_exact_match(m, val_set, config.max_decode_len)

    partition = config.partition
    rng = np.random.default_rng(config.seed)
    # a separate stream, so dropout settings never change the batch order
    drop_rng = np.random.default_rng([config.seed, 1])
    names = model.names(partition)
    opt = Adam({k: model.params[k].data for k in names}, config.lr, config.beta1, config.beta2, config.eps)

    best_em = eval_fn(model)
    best_state = model.state()
    history = [{"epoch": 0, "train_loss": None, "val_em": best_em}]
    log.info("epoch 0 val_em %.4f", best_em)
    stale = 0
    losses: List[float] = []
    steps = 0
    n = len(train_set)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            loss, grads = loss_and_gradients(model, batch, partition, drop_rng)
            opt.step(model, grads)
            losses.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        stop = max_steps is not None and steps >= max_steps
        if epoch % config.eval_interval == 0 or epoch == config.max_epochs or stop:
            em = eval_fn(model)
            history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_em": em})
            log.info("epoch %d loss %.4f val_em %.4f", epoch, np.mean(losses), em)
            losses = []
            if em > best_em:
                best_em, best_state, stale = em, model.state(), 0
            else:
                stale += 1
            if stale >= config.patience or best_em >= 1.0:
                break
        if stop:
            break
    model.set_trainable("none")
    best = model.copy()
    best.load_state(best_state)
    return best, history
