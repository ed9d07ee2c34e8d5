"""Minimal reverse-mode automatic differentiation for the EgoMap networks."""
from .gradcheck import GradCheckResult, finite_diff_check, relative_error
from .ops import *  # noqa: F401,F403
from .ops import __all__ as _ops_all
from .tensor import (PRECISIONS, Tape, Tensor, active_tape, as_tensor, get_dtype, no_tape,
                     parameter, precision, reverse_sweep, set_precision)

__all__ = list(_ops_all) + [
    "GradCheckResult", "finite_diff_check", "relative_error", "PRECISIONS", "Tape", "Tensor",
    "active_tape", "as_tensor", "get_dtype", "no_tape", "parameter", "precision",
    "reverse_sweep", "set_precision",
]
