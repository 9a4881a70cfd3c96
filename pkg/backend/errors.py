"""
Error types for the SAE-Steering testbed
Every failure raised by the package derives from SaeSteeringError
"""

from typing import List, Optional


class SaeSteeringError(Exception):
    """Base class for all package errors"""


class InvalidArgumentError(SaeSteeringError, ValueError):
    """Argument outside the operation's precondition (bad k, shape mismatch, empty input...)"""


class DegenerateInputError(SaeSteeringError, ValueError):
    """Input is rank deficient where full rank is required"""


class ConfigError(InvalidArgumentError):
    """Run configuration rejected; `problems` lists every violation found"""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DumpFormatError(SaeSteeringError, ValueError):
    """Tensor dump file is malformed (bad magic, version or truncated)"""


class StageError(SaeSteeringError, RuntimeError):
    """A pipeline stage failed; `stage` names it"""

    def __init__(self, stage: str, message: str, cause: Optional[BaseException] = None):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {message}")
