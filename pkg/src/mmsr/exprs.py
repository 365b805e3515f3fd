"""Expression trees over the fixed primitive set.

An :class:`Expr` node is an operator, a variable, or a constant literal.
Constants are coded in scientific-like notation (mantissa in [-1, -0.1] or
[0.1, 1), power-of-ten exponent in [-5, 5]); the exponent travels as the
placeholder token class while the mantissa is a co-indexed real.  Trees
serialize to preorder token sequences bracketed by BOS/EOS and padded with P.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    LengthExceeded,
    MalformedSequence,
    OutOfRange,
    StrayMantissa,
    UnencodableConstant,
)
from .vocab import ARITY, BINARY_OPS, OPERATORS, UNARY_OPS, Vocabulary

CONST_OP = "C"

# Representable constant band: |v| in [10^-6, 10^5), i.e. exponents -5..5
# with |mantissa| in [0.1, 1).
CONST_ABS_MIN = 1e-6
CONST_ABS_MAX = 1e5


@dataclass(frozen=True)
class ConstantCode:
    """Mantissa/exponent coding of a nonzero real: value == mantissa * 10**exponent."""

    mantissa: float
    exponent: int

    @property
    def value(self) -> float:
        return self.mantissa * 10.0 ** self.exponent


def encode_constant(value: float) -> ConstantCode:
    """Code a nonzero real with |value| in [1e-6, 1e5).

    The exponent is floor(log10 |value|) + 1 so the mantissa lands in
    [0.1, 1) by absolute value; decoding reproduces the input to ~1 ulp.
    """
    if value == 0.0 or not math.isfinite(value):
        raise OutOfRange(f"constant {value!r} has no mantissa/exponent form")
    mag = abs(value)
    if mag < CONST_ABS_MIN or mag >= CONST_ABS_MAX:
        raise OutOfRange(f"constant {value!r} outside representable band "
                         f"[{CONST_ABS_MIN}, {CONST_ABS_MAX})")
    exponent = math.floor(math.log10(mag)) + 1
    mantissa = value / 10.0 ** exponent
    # log10 can land a hair off a decade boundary; renormalize.
    if abs(mantissa) >= 1.0:
        exponent += 1
        mantissa = value / 10.0 ** exponent
    elif abs(mantissa) < 0.1:
        exponent -= 1
        mantissa = value / 10.0 ** exponent
        if abs(mantissa) >= 1.0:
            # the value sits one float quantum under a decade edge (e.g. 1e-6,
            # where 1e-6/1e-5 rounds below 0.1): snap to the edge mantissa
            exponent += 1
            mantissa = math.copysign(0.1, value)
    if not -5 <= exponent <= 5:
        raise OutOfRange(f"constant {value!r} needs exponent {exponent} outside [-5, 5]")
    return ConstantCode(mantissa, exponent)


class Expr:
    """Expression tree node.

    ``op`` is an operator name ("+", "sin", ...), a variable name ("x1", ...)
    or :data:`CONST_OP` for a constant literal carried in ``value``.
    """

    __slots__ = ("op", "children", "value")

    def __init__(self, op: str, children: tuple = (), value: float | None = None):
        if op == CONST_OP:
            if children or value is None:
                raise ValueError("constant node takes a value and no children")
        elif op in ARITY:
            if len(children) != ARITY[op]:
                raise ValueError(f"{op} expects {ARITY[op]} children, got {len(children)}")
        elif op.startswith("x") and op[1:].isdigit() and int(op[1:]) >= 1:
            if children:
                raise ValueError("variable node takes no children")
        else:
            raise ValueError(f"unknown primitive {op!r}")
        self.op = op
        self.children = tuple(children)
        self.value = value

    def is_constant(self) -> bool:
        return self.op == CONST_OP

    def is_variable(self) -> bool:
        return self.op not in ARITY and self.op != CONST_OP

    @property
    def var_index(self) -> int:
        """0-based column index of a variable node."""
        if not self.is_variable():
            raise ValueError(f"{self.op} is not a variable")
        return int(self.op[1:]) - 1

    def depth(self) -> int:
        """Edge count of the longest root-to-leaf path; a bare leaf has depth 0."""
        if not self.children:
            return 0
        return 1 + max(c.depth() for c in self.children)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def constants(self) -> list[float]:
        """Constant literals in preorder (the slot order used everywhere)."""
        out: list[float] = []
        self._collect_constants(out)
        return out

    def _collect_constants(self, out: list[float]) -> None:
        if self.is_constant():
            out.append(self.value)
        for c in self.children:
            c._collect_constants(out)

    def with_constants(self, values) -> "Expr":
        """Copy of the tree with constant slots replaced in preorder order."""
        values = list(values)
        if len(values) != len(self.constants()):
            raise ValueError(f"expected {len(self.constants())} constants, got {len(values)}")
        it = iter(values)
        return self._substitute(it)

    def _substitute(self, it) -> "Expr":
        if self.is_constant():
            return Expr(CONST_OP, value=float(next(it)))
        return Expr(self.op, tuple(c._substitute(it) for c in self.children), self.value)

    def max_var_index(self) -> int:
        """Highest 1-based variable index used, 0 if the tree has none."""
        own = self.var_index + 1 if self.is_variable() else 0
        return max([own] + [c.max_var_index() for c in self.children])

    def infix(self) -> str:
        """Fully parenthesized human-readable rendering."""
        if self.is_constant():
            return repr(self.value)
        if self.is_variable():
            return self.op
        if self.op in BINARY_OPS:
            lhs, rhs = self.children
            return f"({lhs.infix()} {self.op} {rhs.infix()})"
        return f"{self.op}({self.children[0].infix()})"

    def __repr__(self) -> str:
        return f"Expr({self.infix()})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Expr):
            return NotImplemented
        return (self.op == other.op and self.value == other.value
                and self.children == other.children)

    __hash__ = None


def constant(value: float) -> Expr:
    return Expr(CONST_OP, value=float(value))


def variable(index: int) -> Expr:
    return Expr(f"x{index}")


def expr_equal(a: Expr, b: Expr, rel_tol: float = 1e-12) -> bool:
    """Structural equality with relative tolerance on constant literals."""
    if a.op != b.op or len(a.children) != len(b.children):
        return False
    if a.is_constant():
        return math.isclose(a.value, b.value, rel_tol=rel_tol, abs_tol=0.0)
    return all(expr_equal(x, y, rel_tol) for x, y in zip(a.children, b.children))


@dataclass
class TokenizedExpr:
    """Padded preorder serialization: symbol ids plus co-indexed mantissas.

    ``symbols`` has length n_max with BOS + preorder + EOS up front and PAD
    after; ``mantissas`` is nonzero exactly at constant-placeholder indices.
    """

    symbols: np.ndarray  # uint16, shape (n_max,)
    mantissas: np.ndarray  # float64, shape (n_max,)
    valid_len: int  # BOS + body + EOS

    @property
    def n_max(self) -> int:
        return len(self.symbols)

    def names(self, vocab: Vocabulary) -> list[str]:
        """Token names of the non-pad prefix."""
        return [vocab.name_of(int(t)) for t in self.symbols[: self.valid_len]]

    def skeleton_key(self) -> bytes:
        """Hashable identity of the symbol sequence (mantissas excluded)."""
        return self.symbols.tobytes()

    def copy(self) -> "TokenizedExpr":
        return TokenizedExpr(self.symbols.copy(), self.mantissas.copy(), self.valid_len)


def _preorder_nodes(expr: Expr, out: list[Expr]) -> None:
    out.append(expr)
    for c in expr.children:
        _preorder_nodes(c, out)


def to_preorder(expr: Expr, n_max: int, vocab: Vocabulary) -> TokenizedExpr:
    """Serialize a tree: BOS + preorder (left child first) + EOS + padding.

    Constant literals become placeholder tokens C{e} with the mantissa written
    at the same index of the mantissa track.
    """
    nodes: list[Expr] = []
    _preorder_nodes(expr, nodes)
    if len(nodes) + 2 > n_max:
        raise LengthExceeded(f"preorder of {len(nodes)} tokens + BOS/EOS exceeds n_max={n_max}")
    symbols = np.full(n_max, vocab.pad_id, dtype=np.uint16)
    mantissas = np.zeros(n_max, dtype=np.float64)
    symbols[0] = vocab.bos_id
    for i, node in enumerate(nodes, start=1):
        if node.is_constant():
            try:
                code = encode_constant(node.value)
            except OutOfRange as exc:
                raise UnencodableConstant(str(exc)) from exc
            symbols[i] = vocab.placeholder_id(code.exponent)
            mantissas[i] = code.mantissa
        elif node.is_variable():
            if node.var_index >= vocab.d_max:
                raise MalformedSequence(f"variable {node.op} exceeds vocabulary d_max={vocab.d_max}")
            symbols[i] = vocab.id_of(node.op)
        else:
            symbols[i] = vocab.id_of(node.op)
    symbols[len(nodes) + 1] = vocab.eos_id
    return TokenizedExpr(symbols, mantissas, len(nodes) + 2)


def from_preorder(tok: TokenizedExpr, vocab: Vocabulary) -> Expr:
    """Rebuild the tree from a padded token sequence, validating throughout."""
    symbols = np.asarray(tok.symbols)
    mantissas = np.asarray(tok.mantissas, dtype=np.float64)
    n_max = len(symbols)
    if len(mantissas) != n_max:
        raise MalformedSequence("symbol and mantissa tracks differ in length")
    if n_max == 0 or int(symbols[0]) != vocab.bos_id:
        raise MalformedSequence("sequence must start with BOS")

    eos_positions = np.nonzero(symbols == vocab.eos_id)[0]
    if len(eos_positions) == 0:
        raise MalformedSequence("sequence has no EOS")
    end = int(eos_positions[0])
    if np.any(symbols[end + 1:] != vocab.pad_id):
        raise MalformedSequence("non-pad tokens after EOS")
    if tok.valid_len != end + 1:
        raise MalformedSequence(f"valid_len {tok.valid_len} does not match EOS at {end}")

    for i in range(n_max):
        if mantissas[i] != 0.0 and not vocab.is_placeholder(int(symbols[i])):
            raise StrayMantissa(f"nonzero mantissa at non-placeholder index {i}")

    body = symbols[1:end]
    if len(body) == 0:
        raise MalformedSequence("empty expression body")
    pos = 0

    def parse() -> Expr:
        nonlocal pos
        if pos >= len(body):
            raise MalformedSequence("sequence ends before all arities close")
        tid = int(body[pos])
        idx = pos + 1  # index into the full track
        pos += 1
        if vocab.is_structural(tid):
            raise MalformedSequence(f"structural token inside body at index {idx}")
        if vocab.is_placeholder(tid):
            m = float(mantissas[idx])
            if m == 0.0:
                raise MalformedSequence(f"placeholder at index {idx} has zero mantissa")
            return constant(m * 10.0 ** vocab.placeholder_exponent(tid))
        if vocab.is_variable(tid):
            return variable(vocab.variable_index(tid) + 1)
        name = vocab.name_of(tid)
        kids = tuple(parse() for _ in range(ARITY[name]))
        return Expr(name, kids)

    expr = parse()
    if pos != len(body):
        raise MalformedSequence(f"arities close at body position {pos} but body has {len(body)} tokens")
    return expr


def evaluate(expr: Expr, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the tree on an n-by-d matrix.

    Returns (values, valid): rows with a domain violation or any non-finite
    intermediate are flagged invalid instead of aborting the batch.
    """
    from .kernels import evaluate as kernel_evaluate
    from .kernels.programs import flatten

    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if expr.max_var_index() > X.shape[1]:
        raise ValueError(f"expression uses x{expr.max_var_index()} but X has {X.shape[1]} columns")
    prog = flatten(expr)
    return kernel_evaluate(prog, prog.consts, X)


def grad_constants(expr: Expr, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """MSE against y and its exact gradient with respect to each constant slot.

    Slots are the constant literals in preorder order.  Raises DomainError if
    any row evaluates invalid at the current constants.
    """
    from .kernels import mse_and_grad
    from .kernels.programs import flatten

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    prog = flatten(expr)
    if prog.n_slots == 0:
        raise ValueError("expression has no constant slots")
    mse, grad, ok = mse_and_grad(prog, prog.consts, X, y)
    if not ok:
        raise DomainError("evaluation invalid on at least one row at the current constants")
    return mse, grad


# --- infix parsing (for benchmark suite definitions and round-trip tests) ---

_FUNCS = set(UNARY_OPS)


def _tokenize_infix(text: str) -> list[str]:
    tokens: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "+-*/()":
            tokens.append(ch)
            i += 1
        elif ch.isdigit() or ch == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                while k < n and text[k].isdigit():
                    k += 1
                j = k
            tokens.append(text[i:j])
            i = j
        elif ch.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(text[i:j])
            i = j
        else:
            raise ValueError(f"unexpected character {ch!r} in expression")
    return tokens


def parse_infix(text: str) -> Expr:
    """Parse infix with the usual precedence into an Expr.

    Supports the nine operators, numeric literals, x1..xK and parentheses.
    Unary minus negates a literal directly and otherwise multiplies by -1.
    """
    tokens = _tokenize_infix(text)
    pos = 0

    def peek() -> str | None:
        return tokens[pos] if pos < len(tokens) else None

    def take() -> str:
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        return tok

    def expect(tok: str) -> None:
        got = take() if pos < len(tokens) else None
        if got != tok:
            raise ValueError(f"expected {tok!r}, got {got!r}")

    def parse_expr() -> Expr:
        node = parse_term()
        while peek() in ("+", "-"):
            op = take()
            node = Expr(op, (node, parse_term()))
        return node

    def parse_term() -> Expr:
        node = parse_factor()
        while peek() in ("*", "/"):
            op = take()
            node = Expr(op, (node, parse_factor()))
        return node

    def parse_factor() -> Expr:
        if peek() == "-":
            take()
            inner = parse_factor()
            if inner.is_constant():
                return constant(-inner.value)
            return Expr("*", (constant(-1.0), inner))
        return parse_primary()

    def parse_primary() -> Expr:
        tok = peek()
        if tok is None:
            raise ValueError("unexpected end of expression")
        if tok == "(":
            take()
            node = parse_expr()
            expect(")")
            return node
        take()
        if tok[0].isdigit() or tok[0] == ".":
            return constant(float(tok))
        if tok in _FUNCS:
            expect("(")
            node = parse_expr()
            expect(")")
            return Expr(tok, (node,))
        if tok.startswith("x") and tok[1:].isdigit():
            return variable(int(tok[1:]))
        raise ValueError(f"unknown token {tok!r}")

    expr = parse_expr()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens after position {pos}")
    return expr
