"""A small dense-tensor engine with tape-based reverse-mode gradients."""

from satlab.autodiff.gradcheck import GradCheckReport, grad_check, rel_err, sample_coordinates
from satlab.autodiff.ops import (
    UNARY_RULES,
    add,
    cross_entropy_mean,
    div,
    embedding_lookup,
    ew_binary,
    ew_unary,
    index,
    matmul,
    mean,
    mul,
    reshape,
    rms_norm,
    rope_apply,
    softmax_lastdim,
    sub,
    sum,
    token_nll,
    transpose,
)
from satlab.autodiff.tensor import (
    DomainError,
    ShapeError,
    Tensor,
    Trace,
    active_trace,
    backward,
    no_trace,
)
