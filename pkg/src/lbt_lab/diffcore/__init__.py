"""Reverse-mode autodiff with differentiable gradients, plus RNG and gradchecks."""

from .check import GradCheckResult, finite_difference_check, second_order_check
from .graph import (
    ContractError,
    DiffError,
    DomainError,
    Node,
    ShapeError,
    add,
    apply_primitive,
    broadcast,
    concat,
    constant,
    div,
    exp,
    gradient,
    log,
    log_sigmoid,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    reshape,
    scatter,
    sigmoid,
    slice,
    softplus,
    sqrt,
    square,
    sub,
    sum,
    sum_to,
    tanh,
    transpose,
    variable,
)
from .rng import Rng, sample_standard_normal, splitmix64

__all__ = [
    "ContractError", "DiffError", "DomainError", "GradCheckResult", "Node", "Rng",
    "ShapeError", "add", "apply_primitive", "broadcast", "concat", "constant", "div",
    "exp", "finite_difference_check", "gradient", "log", "log_sigmoid", "logsumexp",
    "matmul", "mean", "mul", "neg", "reshape", "sample_standard_normal", "scatter",
    "second_order_check", "sigmoid", "slice", "softplus", "splitmix64", "sqrt",
    "square", "sub", "sum", "sum_to", "tanh", "transpose", "variable",
]
