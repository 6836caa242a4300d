from .tensor import (
    Graph,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)
from .gradcheck import finite_diff_check
from . import ops

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "default_dtype",
    "no_grad",
    "precision",
    "set_default_dtype",
    "finite_diff_check",
    "ops",
]
