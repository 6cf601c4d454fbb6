from app.diffcore.gradcheck import GradCheckReport, grad_check
from app.diffcore.graph import Graph, backward, eval_graph
from app.diffcore.optim import Adam, AdamState, adam_step
from app.diffcore.tensor import (
    Tensor,
    as_tensor,
    constant,
    dtype_for,
    get_dtype,
    gradients,
    is_grad_enabled,
    no_grad,
    parameter,
    precision,
)

__all__ = [
    "Adam",
    "AdamState",
    "GradCheckReport",
    "Graph",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "constant",
    "dtype_for",
    "eval_graph",
    "get_dtype",
    "grad_check",
    "gradients",
    "is_grad_enabled",
    "no_grad",
    "parameter",
    "precision",
]
