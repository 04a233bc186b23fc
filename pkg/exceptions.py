"""
This module defines the custom exceptions raised across the collaborative-inference engine.

Two families sit below GscoError:

    ValidationError: the input, the configuration or a file on disk is wrong.
        The command line maps these to exit code 1.
    RuntimeFailure: a backend, the network or the filesystem failed while
        doing valid work. The command line maps these to exit code 2.

Every exception carries a human-readable `message` attribute.
"""

from typing import Optional, Sequence


class GscoError(Exception):
    """
    Base class for every error raised by this package.

    Attributes:
        message (str): explanation of the error
    """

    default_message = "An error occurred in the collaborative-inference engine"

    def __init__(self, message: Optional[str] = None):
        self.message = message or self.default_message
        super().__init__(self.message)


class ValidationError(GscoError):
    """
    Exception raised when input data or configuration is invalid.

    Attributes:
        message (str): explanation of the error
        lines (tuple): 1-based line numbers in the offending file, if any
    """

    default_message = "Validation failed"

    def __init__(self, message: Optional[str] = None, lines: Sequence[int] = ()):
        self.lines = tuple(lines)
        text = message or self.default_message
        if self.lines:
            where = ", ".join(str(n) for n in self.lines)
            label = "line" if len(self.lines) == 1 else "lines"
            text = f"{label} {where}: {text}"
        super().__init__(text)

    @property
    def line(self) -> Optional[int]:
        """First offending line number, or None."""
        return self.lines[0] if self.lines else None


class RuntimeFailure(GscoError):
    """Exception raised when valid work fails because of the environment."""

    default_message = "A runtime failure occurred"


# Validation family

class LabelSetError(ValidationError):
    """Exception raised for an empty or ambiguous label vocabulary."""

    default_message = "Invalid label set"


class DimensionError(ValidationError):
    """Exception raised when vector dimensions disagree."""

    default_message = "Embedding dimensions do not match"


class DegenerateVectorError(ValidationError):
    """Exception raised for a zero-norm or non-finite vector."""

    default_message = "Vector has zero norm"


class DuplicateIdError(ValidationError):
    """Exception raised when an identifier occurs more than once."""

    default_message = "Duplicate identifier"


class FormatError(ValidationError):
    """Exception raised for a corrupt or unsupported index file."""

    default_message = "Index file is corrupt or has an unsupported format"


class ParseError(ValidationError):
    """Exception raised for a line that is not a well-formed JSON object."""

    default_message = "Malformed line"


class ShapeError(ValidationError):
    """Exception raised when paired sequences differ in length."""

    default_message = "Truth and prediction lengths differ"


class EmptyInputError(ValidationError):
    """Exception raised when a metric or report receives no data."""

    default_message = "No input records"


class EmptyVoteError(ValidationError):
    """Exception raised when a vote is requested over no predictions."""

    default_message = "Cannot vote over an empty set of predictions"


class MissingBindingError(ValidationError):
    """
    Exception raised when a template placeholder has no binding.

    Attributes:
        name (str): the unbound placeholder name
    """

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"No binding for placeholder {{{name}}}")


class UnknownTemplateError(ValidationError):
    """Exception raised for a template id with no resource file."""

    default_message = "Unknown template id"


class BindingError(ValidationError):
    """Exception raised for an unknown placeholder key or a value holding a known placeholder."""

    default_message = "Invalid prompt binding"


class ConfigError(ValidationError):
    """Exception raised for invalid run or backend configuration."""

    default_message = "Invalid configuration"


# Runtime family

class StorageError(RuntimeFailure):
    """Exception raised when reading or writing an artifact fails."""

    default_message = "Storage operation failed"


class BackendError(RuntimeFailure):
    """Exception raised when a backend cannot be reached or has no answer."""

    default_message = "Backend request failed"


class ProtocolError(RuntimeFailure):
    """Exception raised when a backend answers with a malformed or invalid payload."""

    default_message = "Backend response violates the wire protocol"


class AllBackendsFailedError(RuntimeFailure):
    """
    Exception raised when every specialist in the panel failed.

    Attributes:
        failures (dict): specialist_id -> error message
    """

    def __init__(self, failures: dict):
        self.failures = dict(failures)
        detail = "; ".join(f"{key}: {value}" for key, value in self.failures.items())
        super().__init__(f"All specialists failed ({detail})")


class InferenceError(RuntimeFailure):
    """Exception raised when the generalist fails to produce text."""

    default_message = "Generalist inference failed"
