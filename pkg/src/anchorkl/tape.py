"""Reverse-mode scalar differentiation with a first-class stop-gradient.

Estimator formulas are written directly in terms of these scalars and
differentiated mechanically, so the estimators under audit are the same
expressions the math is stated in.  A ``Tape`` is an append-only graph:
node creation order is a topological order, which makes the backward
pass a single deterministic reverse loop.

Everything is 64-bit float.  ``sign(0) = 0`` and ``d|x|/dx = 0`` at
``x = 0`` (symmetric subgradient; the total-variation generator relies
on this at ``w = 1``).
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

import numpy as np

Real = Union["DiffScalar", float, int]


class TapeDomainError(ValueError):
    """Raised when an op is evaluated outside its domain (e.g. log of a nonpositive value)."""


class Tape:
    """Append-only expression graph confined to one logical task.

    ``cache`` is scratch space for memoizing shared subexpressions
    (keyed by caller-owned objects); it never affects semantics.
    """

    __slots__ = ("values", "parents", "partials", "cache")

    def __init__(self) -> None:
        self.values: list[float] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self.cache: dict = {}

    def __len__(self) -> int:
        return len(self.values)

    def _append(self, value: float, parents: tuple[int, ...], partials: tuple[float, ...]) -> "DiffScalar":
        idx = len(self.values)
        self.values.append(float(value))
        self.parents.append(parents)
        self.partials.append(partials)
        return DiffScalar(self, idx)

    def leaf(self, value: float) -> "DiffScalar":
        """New independent node (parameter or constant)."""
        return self._append(value, (), ())

    # `constant` is an alias that documents intent at call sites.
    constant = leaf

    def parameters(self, values: Iterable[float]) -> list["DiffScalar"]:
        return [self.leaf(v) for v in values]

    def backward(self, output: "DiffScalar", wrt: Sequence["DiffScalar"]) -> np.ndarray:
        """Accumulated partials of ``output`` w.r.t. each handle in ``wrt``.

        Handles from another tape (or created after ``output``) get an
        exactly-zero entry.  Traversal order is fixed by node index, so
        the result is bit-deterministic.
        """
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        n = output.index + 1
        adjoint = [0.0] * n
        adjoint[output.index] = 1.0
        parents = self.parents
        partials = self.partials
        for i in range(output.index, -1, -1):
            a = adjoint[i]
            if a == 0.0:
                continue
            for p, d in zip(parents[i], partials[i]):
                adjoint[p] += a * d
        grad = np.zeros(len(wrt))
        for k, h in enumerate(wrt):
            if h.tape is self and h.index < n:
                grad[k] = adjoint[h.index]
        return grad


class DiffScalar:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.values[self.index]

    def __repr__(self) -> str:
        return f"DiffScalar({self.value!r} @ {self.index})"

    def _coerce(self, other: Real) -> "DiffScalar":
        if isinstance(other, DiffScalar):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.leaf(float(other))

    # Constant operands get single-parent nodes (no leaf materialized).

    def __add__(self, other: Real) -> "DiffScalar":
        if isinstance(other, DiffScalar):
            o = self._coerce(other)
            return self.tape._append(self.value + o.value, (self.index, o.index), (1.0, 1.0))
        return self.tape._append(self.value + float(other), (self.index,), (1.0,))

    __radd__ = __add__

    def __sub__(self, other: Real) -> "DiffScalar":
        if isinstance(other, DiffScalar):
            o = self._coerce(other)
            return self.tape._append(self.value - o.value, (self.index, o.index), (1.0, -1.0))
        return self.tape._append(self.value - float(other), (self.index,), (1.0,))

    def __rsub__(self, other: Real) -> "DiffScalar":
        return self.tape._append(float(other) - self.value, (self.index,), (-1.0,))

    def __mul__(self, other: Real) -> "DiffScalar":
        if isinstance(other, DiffScalar):
            o = self._coerce(other)
            return self.tape._append(
                self.value * o.value, (self.index, o.index), (o.value, self.value)
            )
        c = float(other)
        return self.tape._append(self.value * c, (self.index,), (c,))

    __rmul__ = __mul__

    def __truediv__(self, other: Real) -> "DiffScalar":
        if isinstance(other, DiffScalar):
            o = self._coerce(other)
            if o.value == 0.0:
                raise TapeDomainError("div: zero denominator")
            v = self.value / o.value
            return self.tape._append(v, (self.index, o.index), (1.0 / o.value, -v / o.value))
        c = float(other)
        if c == 0.0:
            raise TapeDomainError("div: zero denominator")
        return self.tape._append(self.value / c, (self.index,), (1.0 / c,))

    def __rtruediv__(self, other: Real) -> "DiffScalar":
        if self.value == 0.0:
            raise TapeDomainError("div: zero denominator")
        c = float(other)
        v = c / self.value
        return self.tape._append(v, (self.index,), (-v / self.value,))

    def __neg__(self) -> "DiffScalar":
        return self.tape._append(-self.value, (self.index,), (-1.0,))

    def __pow__(self, exponent: float) -> "DiffScalar":
        c = float(exponent)
        v = self.value**c
        return self.tape._append(v, (self.index,), (c * self.value ** (c - 1.0),))


def log(x: Real) -> Real:
    if isinstance(x, DiffScalar):
        if x.value <= 0.0:
            raise TapeDomainError(f"log: nonpositive argument {x.value}")
        return x.tape._append(math.log(x.value), (x.index,), (1.0 / x.value,))
    if x <= 0.0:
        raise TapeDomainError(f"log: nonpositive argument {x}")
    return math.log(x)


def exp(x: Real) -> Real:
    if isinstance(x, DiffScalar):
        v = math.exp(x.value)
        return x.tape._append(v, (x.index,), (v,))
    return math.exp(x)


def sqrt(x: Real) -> Real:
    if isinstance(x, DiffScalar):
        if x.value <= 0.0:
            raise TapeDomainError(f"sqrt: nonpositive argument {x.value}")
        v = math.sqrt(x.value)
        return x.tape._append(v, (x.index,), (0.5 / v,))
    if x <= 0.0:
        raise TapeDomainError(f"sqrt: nonpositive argument {x}")
    return math.sqrt(x)


def sign_value(v: float) -> float:
    return 0.0 if v == 0.0 else math.copysign(1.0, v)


def absval(x: Real) -> Real:
    if isinstance(x, DiffScalar):
        return x.tape._append(abs(x.value), (x.index,), (sign_value(x.value),))
    return abs(x)


def sign(x: Real) -> Real:
    # Piecewise constant: derivative 0 a.e., so the node is a fresh leaf.
    if isinstance(x, DiffScalar):
        return x.tape.leaf(sign_value(x.value))
    return sign_value(x)


def stop_gradient(x: Real) -> Real:
    """Value pass-through that blocks all backward flow."""
    if isinstance(x, DiffScalar):
        return x.tape.leaf(x.value)
    return float(x)


sg = stop_gradient
