"""Pure-numpy reference backend for expression programs.

Semantics shared with the compiled backend: every step is computed with IEEE
arithmetic (no exceptions raised), and a row turns invalid — stickily — the
moment any of its intermediate results is non-finite.  Trig arguments beyond
TRIG_ARG_MAX also invalidate the row: past that point the double's ulp is a
large fraction of the period, the phase is unresolvable, and vectorized and
scalar libm reductions no longer agree with each other.
"""

from __future__ import annotations

import numpy as np

from .programs import (
    OP_ADD,
    OP_CONST,
    OP_COS,
    OP_DIV,
    OP_EXP,
    OP_LOG,
    OP_MUL,
    OP_SIN,
    OP_SQRT,
    OP_SUB,
    OP_VAR,
    ExprProgram,
)

TRIG_ARG_MAX = 1e8  # |arg| above this: the phase is unresolvable in a double


def _forward(prog: ExprProgram, consts: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run all steps, returning the (n_steps, n) register file and row validity."""
    n = X.shape[0]
    regs = np.empty((prog.n_steps, n), dtype=np.float64)
    valid = np.ones(n, dtype=bool)
    ops, a1, a2 = prog.ops, prog.arg1, prog.arg2
    with np.errstate(all="ignore"):
        for i in range(prog.n_steps):
            op = ops[i]
            if op == OP_CONST:
                regs[i] = consts[a1[i]]
                continue  # a literal cannot invalidate a row
            if op == OP_VAR:
                r = X[:, a1[i]]
            elif op == OP_ADD:
                r = regs[a1[i]] + regs[a2[i]]
            elif op == OP_SUB:
                r = regs[a1[i]] - regs[a2[i]]
            elif op == OP_MUL:
                r = regs[a1[i]] * regs[a2[i]]
            elif op == OP_DIV:
                r = regs[a1[i]] / regs[a2[i]]
            elif op == OP_SIN:
                a = regs[a1[i]]
                valid &= np.abs(a) <= TRIG_ARG_MAX
                r = np.sin(a)
            elif op == OP_COS:
                a = regs[a1[i]]
                valid &= np.abs(a) <= TRIG_ARG_MAX
                r = np.cos(a)
            elif op == OP_EXP:
                r = np.exp(regs[a1[i]])
            elif op == OP_LOG:
                r = np.log(regs[a1[i]])
            elif op == OP_SQRT:
                r = np.sqrt(regs[a1[i]])
            else:
                raise ValueError(f"unknown opcode {op}")
            regs[i] = r
            valid &= np.isfinite(r)
    return regs, valid


def evaluate(prog: ExprProgram, consts: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Expression values on each row of X, plus the per-row validity mask."""
    regs, valid = _forward(prog, consts, X)
    return regs[-1].copy(), valid


def mse_and_grad(
    prog: ExprProgram, consts: np.ndarray, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, bool]:
    """Mean squared error against y and its gradient w.r.t. each constant slot.

    Reverse-mode sweep over the register file.  ``ok`` is False when any row
    is invalid at these constants or the result is non-finite; the numbers
    returned alongside are then meaningless and the caller must discard them.
    """
    n = X.shape[0]
    regs, valid = _forward(prog, consts, X)
    f = regs[-1]
    grad = np.zeros(prog.n_slots, dtype=np.float64)
    with np.errstate(all="ignore"):
        resid = f - y
        mse = float(np.mean(resid * resid))
        adj = np.zeros_like(regs)
        adj[-1] = (2.0 / n) * resid
        ops, a1, a2 = prog.ops, prog.arg1, prog.arg2
        for i in range(prog.n_steps - 1, -1, -1):
            op = ops[i]
            g = adj[i]
            if op == OP_CONST:
                grad[a1[i]] += g.sum()
            elif op == OP_VAR:
                pass
            elif op == OP_ADD:
                adj[a1[i]] += g
                adj[a2[i]] += g
            elif op == OP_SUB:
                adj[a1[i]] += g
                adj[a2[i]] -= g
            elif op == OP_MUL:
                adj[a1[i]] += g * regs[a2[i]]
                adj[a2[i]] += g * regs[a1[i]]
            elif op == OP_DIV:
                adj[a1[i]] += g / regs[a2[i]]
                adj[a2[i]] -= g * regs[i] / regs[a2[i]]
            elif op == OP_SIN:
                adj[a1[i]] += g * np.cos(regs[a1[i]])
            elif op == OP_COS:
                adj[a1[i]] -= g * np.sin(regs[a1[i]])
            elif op == OP_EXP:
                adj[a1[i]] += g * regs[i]
            elif op == OP_LOG:
                adj[a1[i]] += g / regs[a1[i]]
            elif op == OP_SQRT:
                adj[a1[i]] += g * 0.5 / regs[i]
    ok = bool(valid.all()) and np.isfinite(mse) and bool(np.isfinite(grad).all())
    return mse, grad, ok
