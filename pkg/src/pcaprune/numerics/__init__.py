from . import autodiff
from .autodiff import Tape, Var, grad
from .linalg import (
    SvdResult,
    as_matrix,
    centering_matrix,
    complete_basis,
    matmul,
    pinv_diag,
    reconstruct,
    svd_full,
)

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical for a given seed on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


__all__ = [
    "SvdResult", "Tape", "Var", "as_matrix", "autodiff", "centering_matrix",
    "complete_basis", "grad", "make_rng", "matmul", "pinv_diag", "reconstruct",
    "svd_full",
]
