"""
Exception hierarchy for the event-grounding toolkit.

Validation findings are returned as data; these exceptions are reserved for
violated preconditions and malformed inputs.
"""

from typing import Any, Dict, Optional


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit."""


class TokenRangeError(ToolkitError, ValueError):
    """A value cannot be represented by the fixed-width digit format."""


class SequenceParseError(ToolkitError, ValueError):
    """A token stream does not follow the segment grammar."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ContractError(ToolkitError, ValueError):
    """A caller broke an operation's precondition."""


class RecordSchemaError(ToolkitError, ValueError):
    """A JSONL annotation line does not match the record schema."""

    def __init__(self, message: str, field: str, line_number: Optional[int] = None):
        location = f"line {line_number}, " if line_number is not None else ""
        super().__init__(f"{location}field '{field}': {message}")
        self.field = field
        self.line_number = line_number


class TrainingDivergedError(ToolkitError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics
