"""Error taxonomy shared by every module.

Exit-code mapping for the CLI lives in cli.py; library code only raises.
"""


class CagnError(Exception):
    """Base class for all library errors."""


class ContractViolationError(CagnError):
    """An operation was called with arguments violating its contract."""


class ConfigurationError(CagnError):
    """A structurally valid call with an unsatisfiable configuration
    (e.g. group size not dividing the channel count)."""


class ValidationError(CagnError):
    """User-supplied configuration failed validation.

    `failures` collects every problem found in one pass.
    """

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("; ".join(self.failures))


class NotFoundError(CagnError):
    """A referenced task, checkpoint or file does not exist."""


class NumericFailureError(CagnError):
    """NaN/Inf encountered; carries the offending op or iteration when known."""

    def __init__(self, message, op_id=None, iteration=None):
        self.op_id = op_id
        self.iteration = iteration
        super().__init__(message)
