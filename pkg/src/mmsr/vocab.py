"""Token vocabulary: operators, variables, constant placeholders, structural tokens.

Serialized token names are fixed strings: "+", "-", "*", "/", "sin", "cos",
"exp", "log", "sqrt", "x1".."xD", "C-5".."C5", "BOS", "EOS", "P".
"""

from __future__ import annotations

BINARY_OPS = ("+", "-", "*", "/")
UNARY_OPS = ("sin", "cos", "exp", "log", "sqrt")
OPERATORS = BINARY_OPS + UNARY_OPS

PAD_NAME = "P"
BOS_NAME = "BOS"
EOS_NAME = "EOS"

# Exponent range of the constant placeholders C-5..C5 (11 tokens).
EXP_MIN = -5
EXP_MAX = 5

ARITY = {op: 2 for op in BINARY_OPS}
ARITY.update({op: 1 for op in UNARY_OPS})


def placeholder_name(exponent: int) -> str:
    if not EXP_MIN <= exponent <= EXP_MAX:
        raise ValueError(f"placeholder exponent {exponent} outside [{EXP_MIN}, {EXP_MAX}]")
    return f"C{exponent}" if exponent >= 0 else f"C-{-exponent}"


def variable_name(index: int) -> str:
    """1-based variable token, e.g. variable_name(1) == 'x1'."""
    if index < 1:
        raise ValueError(f"variable index must be >= 1, got {index}")
    return f"x{index}"


class Vocabulary:
    """Token-id table for a fixed variable count.

    Id layout: PAD=0, BOS=1, EOS=2, then the 9 operators, then the 11
    placeholders C-5..C5, then x1..x{d_max}.  The layout is stable so that
    serialized corpora and checkpoints agree on ids.
    """

    def __init__(self, d_max: int):
        if d_max < 1:
            raise ValueError(f"d_max must be >= 1, got {d_max}")
        self.d_max = d_max
        names = [PAD_NAME, BOS_NAME, EOS_NAME]
        names.extend(OPERATORS)
        names.extend(placeholder_name(e) for e in range(EXP_MIN, EXP_MAX + 1))
        names.extend(variable_name(k) for k in range(1, d_max + 1))
        self._names = tuple(names)
        self._ids = {name: i for i, name in enumerate(names)}
        self.pad_id = self._ids[PAD_NAME]
        self.bos_id = self._ids[BOS_NAME]
        self.eos_id = self._ids[EOS_NAME]
        self._first_ph = self._ids[placeholder_name(EXP_MIN)]
        self._first_var = self._ids[variable_name(1)]

    @property
    def size(self) -> int:
        return len(self._names)

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown token {name!r}") from None

    def name_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._names):
            raise KeyError(f"token id {token_id} outside vocabulary of size {self.size}")
        return self._names[token_id]

    def is_operator(self, token_id: int) -> bool:
        return 3 <= token_id < 3 + len(OPERATORS)

    def is_placeholder(self, token_id: int) -> bool:
        return self._first_ph <= token_id < self._first_ph + (EXP_MAX - EXP_MIN + 1)

    def placeholder_exponent(self, token_id: int) -> int:
        if not self.is_placeholder(token_id):
            raise ValueError(f"token id {token_id} is not a constant placeholder")
        return EXP_MIN + (token_id - self._first_ph)

    def placeholder_id(self, exponent: int) -> int:
        return self._ids[placeholder_name(exponent)]

    def is_variable(self, token_id: int) -> bool:
        return self._first_var <= token_id < self._first_var + self.d_max

    def variable_index(self, token_id: int) -> int:
        """0-based column index of a variable token."""
        if not self.is_variable(token_id):
            raise ValueError(f"token id {token_id} is not a variable")
        return token_id - self._first_var

    def arity(self, token_id: int) -> int:
        name = self.name_of(token_id)
        return ARITY.get(name, 0)

    def is_structural(self, token_id: int) -> bool:
        return token_id in (self.pad_id, self.bos_id, self.eos_id)
