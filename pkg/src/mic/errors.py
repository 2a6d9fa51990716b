"""Exception taxonomy shared across the package.

Every error raised by this package derives from MicError so callers can
catch one base class. Subclasses also inherit the matching builtin
(ValueError, RuntimeError, ...) to stay friendly to generic handlers.
"""

from __future__ import annotations


class MicError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MicError, ValueError):
    """Invalid configuration value. Carries the offending field name."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class InvalidDimensionError(MicError, ValueError):
    """A truncation or split width is outside the valid range."""


class DegenerateSequenceError(MicError, ValueError):
    """A sequence has zero active tokens; masked statistics are undefined."""


class InsufficientBatchError(MicError, ValueError):
    """Batch-level statistic requested on fewer than two rows."""


class InsufficientDataError(MicError, ValueError):
    """Corpus-level statistic requested on fewer than two embeddings."""


class VocabError(MicError, ValueError):
    """Token id outside the configured vocabulary."""


class NonFiniteError(MicError, FloatingPointError):
    """An operation produced NaN or Inf where finite values are guaranteed."""


class ContractError(MicError, TypeError):
    """An API precondition was violated (shape, scalar-ness, argument type)."""


class UnregisteredOpError(MicError, RuntimeError):
    """Differentiation requested for an op with no registered backward."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"no registered backward for op '{op}'")


class DeterminismError(MicError, RuntimeError):
    """Two evaluations that must agree bit-for-bit did not."""


class UndefinedCorrelationError(MicError, ValueError):
    """Rank correlation requested on a constant input."""


class DatasetError(MicError, ValueError):
    """Malformed dataset file or degenerate label distribution."""


class CheckpointError(MicError, ValueError):
    """Checkpoint file is missing arrays or disagrees with its config."""


class NanLossError(MicError, FloatingPointError):
    """Training aborted on a non-finite loss or gradient component."""

    def __init__(self, component: str, step: int):
        self.component = component
        self.step = step
        super().__init__(f"non-finite value in '{component}' at step {step}; aborting before update")
