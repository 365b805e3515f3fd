"""Expression-evaluation kernels: compiled core with a pure-numpy fallback.

The Cython extension is optional.  Selection happens once at import time:
``MMSR_KERNEL=python`` forces the fallback, ``MMSR_KERNEL=compiled`` turns a
missing extension into an import error, and the default tries the extension
first.  Both backends implement identical semantics (see ``pybackend``).
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ShapeMismatch
from . import pybackend
from .programs import ExprProgram, flatten

__all__ = ["ExprProgram", "flatten", "evaluate", "mse_and_grad", "backend_name"]

_choice = os.environ.get("MMSR_KERNEL", "auto").strip().lower() or "auto"
if _choice not in ("auto", "python", "compiled"):
    raise ValueError(f"MMSR_KERNEL must be 'python' or 'compiled', got {_choice!r}")

_core = None
if _choice != "python":
    try:
        from . import _evalcore as _core
    except ImportError:
        if _choice == "compiled":
            raise
        _core = None

_BACKEND = "python" if _core is None else "compiled"


def backend_name() -> str:
    """Which backend this process selected: 'compiled' or 'python'."""
    return _BACKEND


def _check(prog: ExprProgram, consts, X, y=None):
    consts = np.ascontiguousarray(consts, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeMismatch(f"X must be 2-D, got shape {X.shape}")
    if consts.shape != (prog.n_slots,):
        raise ShapeMismatch(f"expected {prog.n_slots} constants, got shape {consts.shape}")
    if X.shape[1] < prog.n_vars:
        raise ShapeMismatch(f"program reads column {prog.n_vars - 1} but X has {X.shape[1]} columns")
    if y is None:
        return consts, X
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ShapeMismatch(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    return consts, X, y


def evaluate(prog: ExprProgram, consts, X) -> tuple[np.ndarray, np.ndarray]:
    """Program values on each row of X, plus the sticky per-row validity mask."""
    consts, X = _check(prog, consts, X)
    if _core is not None:
        return _core.evaluate(prog.ops, prog.arg1, prog.arg2, consts, X)
    return pybackend.evaluate(prog, consts, X)


def mse_and_grad(prog: ExprProgram, consts, X, y) -> tuple[float, np.ndarray, bool]:
    """MSE against y, gradient w.r.t. constant slots, and an ok flag.

    ``ok`` is False when any row is invalid at these constants or the
    numbers came out non-finite; discard the values in that case.
    """
    consts, X, y = _check(prog, consts, X, y)
    if _core is not None:
        return _core.mse_and_grad(prog.ops, prog.arg1, prog.arg2, consts, X, y)
    return pybackend.mse_and_grad(prog, consts, X, y)
