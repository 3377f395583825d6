from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, check_gradients, grad_check
from .model import (
    BACKBONE,
    PROMPT,
    Model,
    ModelConfig,
    ModelScorer,
    NonFiniteLoss,
    SequenceTooLong,
    forward_logprobs,
    greedy_decode,
    init_model,
    loss_and_gradients,
    parameter_shapes,
)
from .train import FINE_TUNE, PROMPT_TUNE, TrainConfig, train

__all__ = [
    "BACKBONE", "FINE_TUNE", "GradCheckReport", "Model", "ModelConfig", "ModelScorer",
    "NonFiniteLoss", "PROMPT", "PROMPT_TUNE", "SequenceTooLong", "Tensor", "TrainConfig",
    "check_gradients", "forward_logprobs", "grad_check", "greedy_decode", "init_model",
    "load_checkpoint", "loss_and_gradients", "no_grad", "parameter_shapes", "save_checkpoint", "train",
]
