"""Exception types raised across the toolkit."""

from __future__ import annotations


class CtxCtrError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CtxCtrError, ValueError):
    pass


class SchemaMismatchError(CtxCtrError, ValueError):
    pass


class InputError(CtxCtrError, ValueError):
    pass


class ContractViolationError(CtxCtrError):
    """An item or derived feature reached the context model."""


class DoubleAugmentationError(CtxCtrError, ValueError):
    pass


class GenerationError(CtxCtrError):
    pass


class LogParseError(CtxCtrError, ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ReplayError(CtxCtrError):
    pass


class UndefinedMetricError(CtxCtrError, ValueError):
    pass


class ReportError(CtxCtrError):
    pass


class CheckpointError(CtxCtrError):
    pass
