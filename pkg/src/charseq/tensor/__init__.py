"""Minimal reverse-mode autodiff over numpy arrays."""

from charseq.tensor import ops
from charseq.tensor.autograd import Node, Tape, Tensor, as_tensor, backward, current_tape, is_training, no_grad
from charseq.tensor.gradcheck import gradcheck, numerical_grad

__all__ = [
    "Node",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "gradcheck",
    "is_training",
    "no_grad",
    "numerical_grad",
    "ops",
]
