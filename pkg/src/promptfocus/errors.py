"""Exception types shared across the package."""


class PromptFocusError(Exception):
    """Base class for all package errors."""


class DimensionError(PromptFocusError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(PromptFocusError):
    """A configuration value is invalid or inconsistent."""


class ContractError(PromptFocusError):
    """An input violates a documented precondition."""


class StateError(PromptFocusError):
    """An operation was called in the wrong state (e.g. double backward)."""


class FixtureFormatError(PromptFocusError):
    """An embedding fixture file is malformed.

    ``offset`` is the byte offset at which the problem was detected; for a
    truncated file it is the offset of the first missing byte.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(PromptFocusError):
    """File contents are structurally valid but violate a data invariant."""


class EmptySelectionError(PromptFocusError):
    """Every filtering pass of the selection loop came back empty.

    Carries a summary of the score distribution so the caller can see how
    far below the filter threshold the scores sat.
    """

    def __init__(self, message: str, score_summary: dict | None = None):
        super().__init__(message)
        self.score_summary = score_summary or {}


class TrainAbortError(PromptFocusError):
    """Training aborted (non-finite loss); carries the failing step."""

    def __init__(self, message: str, step: int, checkpoint_path: str | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path
