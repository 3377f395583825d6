"""Central finite-difference check of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

from .autograd import Tensor
from .model import Model, ModelConfig, batch_loss, loss_and_gradients, parameter_group


@dataclass
class GradCheckReport:
    max_error: float
    worst: str  # parameter name with the largest error
    per_parameter: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def per_group(self) -> Dict[str, float]:
        groups: Dict[str, float] = {}
        for name, err in self.per_parameter.items():
            g = parameter_group(name)
            groups[g] = max(groups.get(g, 0.0), err)
        return groups

    def offenders(self):
        return sorted(k for k, v in self.per_parameter.items() if v > self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def check_gradients(
    loss_fn: Callable[[], float],
    params: Mapping[str, Tensor],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-4,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``loss_fn``.

    ``loss_fn`` is re-evaluated with each entry of each parameter nudged by
    +/- h in place.
    """
    per = {}
    for name, g in analytic.items():
        data = params[name].data
        numeric = np.zeros_like(data)
        flat = data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        per[name] = float(relative_error(np.asarray(g), numeric).max()) if data.size else 0.0
    if not per:
        return GradCheckReport(0.0, "", {}, tolerance)
    worst = max(per, key=lambda k: (per[k], k))
    return GradCheckReport(per[worst], worst, per, tolerance)


def grad_check(model: Model, example, partition: str = "all", tolerance: float = 1e-4, h: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of :func:`loss_and_gradients` on one example."""
    batch = [example]
    _, grads = loss_and_gradients(model, batch, partition)
    model.set_trainable("none")

    def loss_fn():
        return float(batch_loss(model, batch).data)

    return check_gradients(loss_fn, model.params, grads, h=h, tolerance=tolerance)


def tiny_config(vocab_size: int = 16, prompt_len: int = 4, seed: int = 0, **overrides) -> ModelConfig:
    """A model small enough (under 5k parameters by default) for finite differences.

    Weights start at a larger scale than the training default: with
    N(0, 0.02^2) weights many gradient entries sit near 1e-7, where the
    roundoff in a central difference alone exceeds the relative tolerance.
    """
    base = dict(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, max_len=8, init_std=0.3)
    base.update(overrides)
    return ModelConfig(vocab_size=vocab_size, prompt_len=prompt_len, seed=seed, **base)


def random_example(config: ModelConfig, seed: int = 0, src_len: int = 5, tgt_len: int = 4):
    """A (source, target) id pair avoiding the reserved ids."""
    rng = np.random.default_rng(seed)
    low = 4 if config.vocab_size > 4 else 0
    src = rng.integers(low, config.vocab_size, size=src_len).tolist()
    tgt = rng.integers(low, config.vocab_size, size=tgt_len).tolist()
    return src, tgt
