"""Symbolic dimensions: affine expressions ``coef * name + const`` in one symbol.

A dimension is either a plain ``int`` or a :class:`Sym`. Arithmetic that
would mix two different symbols or leave the affine family raises
:class:`~fusegraph.errors.ShapeError`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

from ..errors import ShapeError

_SYM_RE = re.compile(r"^\s*(?:(\d+)\s*\*\s*)?([A-Za-z_]\w*)\s*(?:([+-])\s*(\d+))?\s*$")


@dataclass(frozen=True)
class Sym:
    name: str
    coef: int = 1
    const: int = 0

    def __post_init__(self):
        if self.coef <= 0:
            raise ShapeError(f"symbolic dimension needs a positive coefficient, got {self.coef}")

    def __add__(self, other: "Dim") -> "Dim":
        if isinstance(other, int):
            return Sym(self.name, self.coef, self.const + other)
        if isinstance(other, Sym) and other.name == self.name:
            return Sym(self.name, self.coef + other.coef, self.const + other.const)
        raise ShapeError(f"cannot add dimensions {self} and {other}")

    __radd__ = __add__

    def __sub__(self, other: "Dim") -> "Dim":
        if isinstance(other, int):
            return Sym(self.name, self.coef, self.const - other)
        if isinstance(other, Sym) and other.name == self.name:
            coef = self.coef - other.coef
            const = self.const - other.const
            if coef == 0:
                return const
            if coef > 0:
                return Sym(self.name, coef, const)
        raise ShapeError(f"cannot subtract dimension {other} from {self}")

    def __rsub__(self, other: "Dim") -> "Dim":
        if isinstance(other, int):
            raise ShapeError(f"dimension {other} - {self} is not a valid extent")
        return NotImplemented

    def __mul__(self, k: int) -> "Sym":
        if not isinstance(k, int) or k <= 0:
            raise ShapeError(f"cannot scale {self} by {k!r}")
        return Sym(self.name, self.coef * k, self.const * k)

    __rmul__ = __mul__

    def evaluate(self, env: Mapping[str, int]) -> int:
        try:
            return self.coef * env[self.name] + self.const
        except KeyError:
            raise ShapeError(f"symbol {self.name!r} is not bound") from None

    def __str__(self) -> str:
        s = self.name if self.coef == 1 else f"{self.coef}*{self.name}"
        if self.const > 0:
            s += f"+{self.const}"
        elif self.const < 0:
            s += f"-{-self.const}"
        return s


Dim = Union[int, Sym]


def parse_dim(value: int | str) -> Dim:
    """Parse a manifest dimension (an int or a string such as ``"2*L-1"``)."""
    if isinstance(value, bool):
        raise ShapeError(f"invalid dimension {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        text = value.strip()
        if re.fullmatch(r"-?\d+", text):
            return int(text)
        m = _SYM_RE.match(text)
        if m:
            coef = int(m.group(1)) if m.group(1) else 1
            const = int(m.group(4)) if m.group(4) else 0
            if m.group(3) == "-":
                const = -const
            return Sym(m.group(2), coef, const)
    raise ShapeError(f"invalid dimension {value!r}")


def dim_to_json(d: Dim) -> int | str:
    return d if isinstance(d, int) else str(d)


def evaluate(d: Dim, env: Mapping[str, int]) -> int:
    return d if isinstance(d, int) else d.evaluate(env)


def evaluate_shape(shape, env: Mapping[str, int]) -> tuple[int, ...]:
    return tuple(evaluate(d, env) for d in shape)


def symbols(shape) -> set[str]:
    return {d.name for d in shape if isinstance(d, Sym)}


# small distinct values used to compare symbolic element counts numerically
SAMPLE_VALUES = (2, 3, 5, 7, 11)


def sample_envs(names) -> list[dict[str, int]]:
    names = sorted(names)
    return [{n: v + 2 * i for i, n in enumerate(names)} for v in SAMPLE_VALUES]


def same_numel(a, b) -> bool:
    """True when two shapes have the same element count for every sampled binding."""
    names = symbols(a) | symbols(b)
    for env in sample_envs(names) or [{}]:
        if _numel(evaluate_shape(a, env)) != _numel(evaluate_shape(b, env)):
            return False
    return True


def infer_missing(known, total) -> Dim:
    """Solve ``prod(known) * x == prod(total)`` for an affine ``x`` (used by Reshape -1)."""
    names = symbols(known) | symbols(total)
    envs = sample_envs(names) or [{}]
    values = []
    for env in envs:
        k = _numel(evaluate_shape(known, env))
        t = _numel(evaluate_shape(total, env))
        if k == 0 or t % k:
            raise ShapeError(f"cannot infer -1 dimension: {list(map(str, total))} / {list(map(str, known))}")
        values.append(t // k)
    if len(set(values)) == 1:
        return values[0]
    if len(names) != 1:
        raise ShapeError("cannot infer -1 dimension over several symbols")
    (name,) = names
    xs = [env[name] for env in envs]
    coef = (values[1] - values[0]) // (xs[1] - xs[0])
    const = values[0] - coef * xs[0]
    if coef <= 0 or any(coef * x + const != v for x, v in zip(xs, values)):
        raise ShapeError("inferred -1 dimension is not affine in the sequence symbol")
    return Sym(name, coef, const)


def _numel(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n
