"""
PA-EWC Desk Lab - Error Types

All failures raised by the lab derive from PAEWCError. Each concrete class also
derives from the closest builtin so callers can catch ValueError / RuntimeError
without importing this module.
"""

from typing import Optional


class PAEWCError(Exception):
    """Base class for every lab error"""


class ConfigError(PAEWCError, ValueError):
    """Invalid model, task, trainer or experiment configuration"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InputError(PAEWCError, ValueError):
    """Operation called with inputs that violate its preconditions"""


class DimensionError(InputError):
    """Tensor shapes do not conform for an op"""


class DomainError(PAEWCError, ValueError):
    """Op evaluated outside its mathematical domain"""


class ContractError(PAEWCError, ValueError):
    """API contract violated (e.g. backward on a non-scalar loss)"""


class StateError(PAEWCError, RuntimeError):
    """Object used in a state that does not allow the request"""


class NumericError(PAEWCError, ArithmeticError):
    """Non-finite value where a finite one is required"""

    def __init__(self, message: str, epoch: Optional[int] = None, run_id: Optional[str] = None):
        self.epoch = epoch
        self.run_id = run_id
        super().__init__(message)


class ClassificationError(PAEWCError):
    """Parameter block cannot be assigned to a group"""

    def __init__(self, block: str):
        self.block = block
        super().__init__(f"block '{block}' has zero gradient response for every prompt category (dead block)")


class CheckpointError(PAEWCError):
    """Base class for checkpoint / snapshot load failures"""


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class NoCompleteRunsError(StateError):
    """Report requested over a runs directory holding no complete run record"""
