"""Minimal numeric core: f64 tensors, reverse-mode autodiff over a small
set of primitives, Adam, and a finite-difference gradient checker."""

from .autodiff import (
    Node, NumericError, add, affine, as_node, attention, concat,
    cross_attention, exp, gather_rows, log_softmax, matmul, mean, mul, relu,
    reshape, scale, softmax, softplus, square, sub, sum_, take, tanh,
    transpose_last2,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamConfig, adam_step, grad_norm
from .params import ParamGroup, ParamSet, load_manifest

__all__ = [
    "Node", "NumericError", "add", "affine", "as_node", "attention",
    "concat", "cross_attention", "exp", "gather_rows", "log_softmax",
    "matmul", "mean", "mul", "relu", "reshape", "scale", "softmax",
    "softplus", "square", "sub", "sum_", "take", "tanh", "transpose_last2",
    "GradCheckReport", "grad_check", "AdamConfig", "adam_step", "grad_norm",
    "ParamGroup", "ParamSet", "load_manifest",
]
