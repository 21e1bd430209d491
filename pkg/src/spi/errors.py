"""Exception types shared across the package."""
from __future__ import annotations


class SpiError(Exception):
    """Base class for all package errors."""


class ContractError(SpiError):
    """An operation was called outside its documented contract."""


class ShapeError(ContractError):
    """Operand dimensions are incompatible; message names both shapes."""


class NumericError(SpiError):
    """A computation produced a non-finite value."""
