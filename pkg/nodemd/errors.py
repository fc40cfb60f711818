"""
Exception hierarchy and process exit codes for nodemd.
"""

from dataclasses import dataclass, asdict
from typing import Any, Dict, Optional


class ErrorCodes:
    INVALID_TOPOLOGY = "invalid-topology"
    INVALID_INPUT = "invalid-input"
    CAPACITY_EXCEEDED = "capacity-exceeded"
    DIMENSION = "dimension-mismatch"
    MODEL = "model-error"
    PARAM_FILE = "param-file-parse"
    PLAN = "plan-error"
    CONSISTENCY = "consistency-error"
    UNDEFINED_METRIC = "undefined-metric"
    CONFIG_MISSING = "config-missing"
    CONFIG_MALFORMED = "config-malformed"
    CONFIG_CONSTRAINT = "config-constraint"
    VALIDATION = "validation-failure"
    STEP = "step-error"


class ExitCodes:
    OK = 0
    RUNTIME = 1
    USAGE = 2
    CONFIG = 3
    VALIDATION = 4
    INTERRUPTED = 130


@dataclass
class ErrorInfo:
    """Serializable error description."""

    code: str
    message: str
    data: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {k: v for k, v in asdict(self).items() if v is not None}


class NodeMDError(Exception):
    """Base class for all nodemd errors."""

    code = "nodemd-error"

    def __init__(self, message: str, **data: Any):
        super().__init__(message)
        self.message = message
        self.data = data or None

    def info(self) -> ErrorInfo:
        return ErrorInfo(code=self.code, message=self.message, data=self.data)


class InvalidTopologyError(NodeMDError, ValueError):
    code = ErrorCodes.INVALID_TOPOLOGY


class InvalidInputError(NodeMDError, ValueError):
    code = ErrorCodes.INVALID_INPUT


class CapacityExceededError(NodeMDError):
    """A neighbor type group does not fit into its ``sel`` capacity."""

    code = ErrorCodes.CAPACITY_EXCEEDED

    def __init__(self, gid: int, neighbor_type: int, count: int, capacity: int):
        super().__init__(
            f"Atom {gid}: {count} neighbors of type {neighbor_type} exceed sel={capacity}",
            gid=gid,
            neighbor_type=neighbor_type,
            count=count,
            capacity=capacity,
        )
        self.gid = gid


class DimensionError(NodeMDError, ValueError):
    code = ErrorCodes.DIMENSION


class ModelError(NodeMDError):
    code = ErrorCodes.MODEL


class ParamFileError(ModelError):
    """Malformed parameter file; ``line`` is 1-based."""

    code = ErrorCodes.PARAM_FILE

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}", line=line)
        self.line = line


class PlanError(NodeMDError):
    code = ErrorCodes.PLAN


class ConsistencyError(NodeMDError):
    code = ErrorCodes.CONSISTENCY


class UndefinedMetricError(NodeMDError, ValueError):
    code = ErrorCodes.UNDEFINED_METRIC


class ConfigError(NodeMDError):
    """Configuration problem; ``path`` is the dotted JSON path when known."""

    code = ErrorCodes.CONFIG_CONSTRAINT

    def __init__(self, message: str, path: Optional[str] = None, code: Optional[str] = None):
        super().__init__(message if path is None else f"{path}: {message}", path=path)
        self.path = path
        if code is not None:
            self.code = code


class ValidationFailure(NodeMDError):
    code = ErrorCodes.VALIDATION


class StepError(NodeMDError):
    """Wraps any error raised inside the MD loop with the step index."""

    code = ErrorCodes.STEP

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}", step=step)
        self.step = step
        self.__cause__ = cause
