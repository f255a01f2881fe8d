"""
Error types for the explanation pipeline
Every error carries the process exit code the CLI maps it to
"""
from typing import Optional


class PipelineError(Exception):
    """Base error; exit_code is pinned for scripting"""
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 1


class DataError(PipelineError):
    exit_code = 2


class MalformedRecordError(DataError):
    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


class GraphError(DataError):
    pass


class PromptError(DataError):
    pass


class CheckpointError(DataError):
    pass


class BackendError(DataError):
    """Text-generation backend failure (unreachable, timeout, bad status)"""

    def __init__(self, message: str, status_code: Optional[int] = None):
        self.status_code = status_code
        super().__init__(message if status_code is None else f"{message} (HTTP {status_code})")


class ScorerError(DataError):
    pass


class NumericalError(PipelineError):
    exit_code = 3


class NumericsError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")


class FrozenParameterError(NumericalError):
    pass


class ContextOverflowError(NumericalError):
    pass
