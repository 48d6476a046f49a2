"""Dense float64 reverse-mode autodiff engine and Adam optimizer."""
from .optim import AdamState
from .tensor import (
    LOG_2PI, Tape, Tensor, add, backward, chol_spd, cholesky, concat,
    diag, diagonal, div, exp, eye, full, gather_rows, gaussian_logpdf_diag,
    gaussian_logpdf_full, gradients, log, logsumexp, matmul, mul, neg,
    no_grad, ones, outer, relu, relu_mask, reset_tape, reshape, sigmoid, softmax,
    softplus, solve_triangular, spd_solve, sub, tanh, tensor, tmean,
    transpose, tsum, zero_grad, zeros,
)

__all__ = [
    "AdamState", "LOG_2PI", "Tape", "Tensor", "add", "backward", "chol_spd",
    "cholesky", "concat", "diag", "diagonal", "div", "exp", "eye", "full",
    "gather_rows", "gaussian_logpdf_diag", "gaussian_logpdf_full",
    "gradients", "log", "logsumexp", "matmul", "mul", "neg", "no_grad",
    "ones", "outer", "relu", "relu_mask", "reset_tape", "reshape", "sigmoid", "softmax",
    "softplus", "solve_triangular", "spd_solve", "sub", "tanh", "tensor",
    "tmean", "transpose", "tsum", "zero_grad", "zeros",
]
