"""
Error taxonomy shared by the pooling library, the toy ViT and the CLI

The CLI maps these onto exit codes (see main.py).
"""

from typing import Optional


class GGeMError(Exception):
    """Base class for every error raised by this package"""


class InvalidArgument(GGeMError, ValueError):
    """An argument violates an operation's precondition"""


class InvalidState(GGeMError, RuntimeError):
    """Operation not allowed in the current configuration"""


class NumericFailure(GGeMError, ArithmeticError):
    """A non-finite value appeared; `where` names the offending index/tensor/block"""

    def __init__(self, message: str, where: Optional[str] = None):
        super().__init__(message)
        self.where = where


class DegenerateInput(GGeMError, ValueError):
    """Input is valid but degenerate (e.g. constant representation for CKA)"""


class TrainingDiverged(NumericFailure):
    """Loss became non-finite; carries the last good model and the partial trace"""

    def __init__(self, message: str, last_good=None, trace=None, where: Optional[str] = None):
        super().__init__(message, where=where)
        self.last_good = last_good
        self.trace = trace


class FormatError(GGeMError, ValueError):
    """Malformed input file; `line` is 1-based when known"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(FormatError):
    """Malformed or incomplete experiment configuration"""
