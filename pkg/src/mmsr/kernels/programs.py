"""Flat postorder programs for vectorized expression evaluation.

A tree is compiled once into parallel int32 arrays (one step per node,
children before parents) so both the numpy and the compiled backend can run
it as a simple register machine.  Constant slots are numbered left to right,
matching the preorder slot order used by tokenization and refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_SIN = 6
OP_COS = 7
OP_EXP = 8
OP_LOG = 9
OP_SQRT = 10

OPCODE = {
    "+": OP_ADD,
    "-": OP_SUB,
    "*": OP_MUL,
    "/": OP_DIV,
    "sin": OP_SIN,
    "cos": OP_COS,
    "exp": OP_EXP,
    "log": OP_LOG,
    "sqrt": OP_SQRT,
}


@dataclass(frozen=True)
class ExprProgram:
    """Register-machine form of one expression.

    ``arg1``/``arg2`` hold child register indices for operator steps; for
    OP_CONST ``arg1`` is the constant slot, for OP_VAR the input column.
    The final register is the expression value.
    """

    ops: np.ndarray  # int32, shape (n_steps,)
    arg1: np.ndarray  # int32, shape (n_steps,)
    arg2: np.ndarray  # int32, shape (n_steps,)
    consts: np.ndarray  # float64, shape (n_slots,) — literals in slot order
    n_vars: int  # 1 + highest input column referenced (0 if none)

    @property
    def n_steps(self) -> int:
        return len(self.ops)

    @property
    def n_slots(self) -> int:
        return len(self.consts)


def flatten(expr) -> ExprProgram:
    """Compile a tree into an :class:`ExprProgram`.

    Constants are leaves, so emitting slots in postorder visits them in the
    same left-to-right order as the preorder used for mantissa co-indexing.
    """
    ops: list[int] = []
    arg1: list[int] = []
    arg2: list[int] = []
    consts: list[float] = []
    n_vars = 0

    def walk(node) -> int:
        nonlocal n_vars
        if node.is_constant():
            slot = len(consts)
            consts.append(float(node.value))
            ops.append(OP_CONST)
            arg1.append(slot)
            arg2.append(-1)
        elif node.is_variable():
            col = node.var_index
            n_vars = max(n_vars, col + 1)
            ops.append(OP_VAR)
            arg1.append(col)
            arg2.append(-1)
        else:
            regs = [walk(c) for c in node.children]
            ops.append(OPCODE[node.op])
            arg1.append(regs[0])
            arg2.append(regs[1] if len(regs) == 2 else -1)
        return len(ops) - 1

    walk(expr)
    return ExprProgram(
        ops=np.asarray(ops, dtype=np.int32),
        arg1=np.asarray(arg1, dtype=np.int32),
        arg2=np.asarray(arg2, dtype=np.int32),
        consts=np.asarray(consts, dtype=np.float64),
        n_vars=n_vars,
    )
