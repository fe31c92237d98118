"""Exception types raised by keypatch. Each carries the CLI exit code it maps to."""
from __future__ import annotations

from typing import Optional


class KeypatchError(Exception):
    exit_code = 1


class ConfigurationError(KeypatchError, ValueError):
    """Bad parameter, inconsistent config/weights or missing model source."""

    exit_code = 2


class DimensionError(ConfigurationError):
    """Attention bundle token count does not match the patch grid."""


class ContractError(KeypatchError, ValueError):
    """Caller handed in data that violates an upstream guarantee."""

    exit_code = 2


class DecodeError(KeypatchError, ValueError):
    """Image file could not be decoded."""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TensorFormatError(DecodeError):
    """Tensor file is malformed."""


class CompletenessError(KeypatchError):
    """A (layer, head) attention record is missing."""

    exit_code = 3


class NumericError(KeypatchError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, layer: Optional[int] = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer
