"""Errors raised while parsing, validating, or executing programs."""

from __future__ import annotations


class MeasureError(Exception):
    pass


class MeasureSyntaxError(MeasureError):
    def __init__(self, line: int, col: int, expected: str, found: str):
        super().__init__(f"line {line}, col {col}: expected {expected}, found {found}")
        self.line = line
        self.col = col
        self.expected = expected
        self.found = found


class DuplicateId(MeasureError):
    pass


class UnknownReference(MeasureError):
    pass


class UnitMismatch(MeasureError):
    pass


class UnknownMeasurement(MeasureError):
    pass


class UnsupportedCombiner(MeasureError):
    pass


class UnboundMeasurement(MeasureError):
    pass


class EmptyBuffer(MeasureError):
    pass
