from .archive import ArchiveError, load_archive, save_archive
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    concat_cols,
    concat_rows,
    div,
    exp,
    gather_rows,
    layer_norm,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    pow_const,
    relu,
    reshape,
    rowmax,
    scaled_dot_attention,
    sigmoid,
    slice_cols,
    slice_rows,
    smooth_abs,
    softmax,
    softplus,
    split_rows,
    sqrt,
    square,
    straight_through,
    sub,
    tanh,
    topk_indices,
    transpose,
)
from .ops import sum as tsum
from .tensor import DTYPE, ShapeError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [name for name in dir() if not name.startswith("_")]
