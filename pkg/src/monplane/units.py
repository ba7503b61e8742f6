"""Unit-bearing scalars shared by the monitoring DSL and the monitors.

Canonical forms: seconds for time, hertz for frequency, and a plain
ratio for percentages. Literals accept the suffixes us/ms/s, hz, and %.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass


class Dimension(enum.Enum):
    TIME = "time"
    FREQUENCY = "frequency"
    RATIO = "ratio"
    SCALAR = "scalar"


# suffix -> (dimension, factor to canonical unit)
_SUFFIXES = {
    "us": (Dimension.TIME, 1e-6),
    "ms": (Dimension.TIME, 1e-3),
    "s": (Dimension.TIME, 1.0),
    "hz": (Dimension.FREQUENCY, 1.0),
    "%": (Dimension.RATIO, 0.01),
}

_LITERAL_RE = re.compile(r"^([0-9]+(?:\.[0-9]+)?)(us|ms|s|hz|%)?$")


class UnitError(ValueError):
    """Malformed unit literal or incompatible dimensions."""


@dataclass(frozen=True)
class Quantity:
    """A value in its canonical unit plus the dimension it carries."""

    value: float
    dimension: Dimension

    def __add__(self, other: "Quantity") -> "Quantity":
        self._require_same(other)
        return Quantity(self.value + other.value, self.dimension)

    def __sub__(self, other: "Quantity") -> "Quantity":
        self._require_same(other)
        return Quantity(self.value - other.value, self.dimension)

    def _require_same(self, other: "Quantity") -> None:
        if self.dimension is not other.dimension:
            raise UnitError(
                f"incompatible dimensions: {self.dimension.value} vs {other.dimension.value}"
            )

    def compatible(self, other: "Quantity") -> bool:
        return self.dimension is other.dimension


def parse_literal(text: str) -> Quantity:
    """Parse a literal like ``10ms``, ``10hz``, ``1%`` or a bare number."""
    m = _LITERAL_RE.match(text.strip())
    if not m:
        raise UnitError(f"malformed literal: {text!r}")
    number, suffix = m.groups()
    if suffix is None:
        return Quantity(float(number), Dimension.SCALAR)
    dim, factor = _SUFFIXES[suffix]
    return Quantity(float(number) * factor, dim)


def format_quantity(q: Quantity) -> str:
    """Render a quantity in a stable literal form (canonical unit)."""
    if q.dimension is Dimension.TIME:
        return _trim(q.value) + "s"
    if q.dimension is Dimension.FREQUENCY:
        return _trim(q.value) + "hz"
    if q.dimension is Dimension.RATIO:
        return _trim(q.value * 100.0) + "%"
    return _trim(q.value)


def _trim(value: float) -> str:
    text = repr(float(value))
    return text[:-2] if text.endswith(".0") else text
