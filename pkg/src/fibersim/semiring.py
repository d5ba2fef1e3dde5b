"""Semirings used to redefine the add/mul operators of a cascade.

The default is ordinary arithmetic over 64-bit numbers.  Graph cascades
swap in (min, +) for shortest paths or (or, *) for reachability.  The
additive identity doubles as the "zero" of the computation: payloads equal
to it are ineffectual, and absent payloads read back as it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

_ADD_OPS = {
    "+": (lambda a, b: a + b, 0),
    "min": (min, math.inf),
    "max": (max, -math.inf),
    "or": (lambda a, b: 1 if (a or b) else 0, 0),
}

_MUL_OPS = {
    "*": lambda a, b: a * b,
    "+": lambda a, b: a + b,
    "min": min,
    "max": max,
    "and": lambda a, b: 1 if (a and b) else 0,
}


@dataclass(frozen=True)
class Semiring:
    add_name: str
    mul_name: str
    add: Callable = field(compare=False)
    mul: Callable = field(compare=False)
    zero: object = field(compare=False)

    def is_zero(self, value) -> bool:
        return value == self.zero

    def __repr__(self):
        return f"Semiring(add={self.add_name!r}, mul={self.mul_name!r})"


def make_semiring(add_name: str = "+", mul_name: str = "*") -> Semiring:
    # "·" is accepted as an alias for ordinary multiplication.
    mul_name = "*" if mul_name in ("·", "x") else mul_name
    if add_name not in _ADD_OPS:
        raise ValueError(f"unknown add operator {add_name!r} (choose from {sorted(_ADD_OPS)})")
    if mul_name not in _MUL_OPS:
        raise ValueError(f"unknown mul operator {mul_name!r} (choose from {sorted(_MUL_OPS)})")
    add, zero = _ADD_OPS[add_name]
    return Semiring(add_name, mul_name, add, _MUL_OPS[mul_name], zero)


ARITHMETIC = make_semiring("+", "*")
MIN_PLUS = make_semiring("min", "+")
