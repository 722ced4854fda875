"""Unit-norm projection of weight matrices.

Case1 matrices read the residual stream: each row (over ``C_in``) is put on
the unit sphere. Case2 matrices write into it: each column (over ``C_out``)
is. Zero rows/columns cannot be normalized and are left untouched.
"""

from __future__ import annotations

import numpy as np

from ..operators.kinds import WnormCase


def wnorm_project(w: np.ndarray, case: WnormCase | str) -> tuple[np.ndarray, int]:
    """Projected copy of ``w`` and the number of zero rows/columns skipped."""
    case = WnormCase(case)
    if case is WnormCase.EXEMPT:
        return w.copy(), 0
    if w.ndim != 2:
        raise ValueError(f"weight normalization needs a matrix, got shape {w.shape}")
    axis = 1 if case is WnormCase.CASE1 else 0
    norms = np.sqrt((w * w).sum(axis=axis, keepdims=True))
    zero = norms == 0.0
    return w / np.where(zero, 1.0, norms), int(zero.sum())


def norms_for_case(w: np.ndarray, case: WnormCase | str) -> np.ndarray:
    """Row norms for Case1, column norms for Case2."""
    axis = 1 if WnormCase(case) is WnormCase.CASE1 else 0
    return np.sqrt((w * w).sum(axis=axis))
