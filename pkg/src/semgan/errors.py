"""Exception types shared across the package.

The CLI maps these onto stable exit codes: validation/parse problems exit 2,
stage-order and frozen-contract violations exit 3, data-integrity failures
exit 4.
"""


class ValidationError(ValueError):
    """Invalid value for a named field or argument."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ParseError(ValueError):
    """Malformed text input, reported with a 1-based line number."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ContractViolationError(RuntimeError):
    """A caller broke a hard runtime contract (e.g. passed a trainable
    detector where a frozen one is required)."""


class StageOrderError(RuntimeError):
    """A pipeline stage received a checkpoint whose provenance chain lacks
    the required predecessor stage."""

    def __init__(self, expected_stage: str, message: str):
        self.expected_stage = expected_stage
        super().__init__(message)


class DataIntegrityError(RuntimeError):
    """Dataset integrity check failed (e.g. test images overlap training
    inputs)."""
