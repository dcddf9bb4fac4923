"""
Exception hierarchy shared by the numerical services and the CLI.

Each class carries the process exit code the CLI maps it to.
"""

from typing import Any, Dict, List, Optional


class PmeError(Exception):
    """Base class for every error raised by the services package."""

    exit_code = 3

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class ConfigError(PmeError):
    """Invalid option values or unsupported combinations."""

    exit_code = 2


class UnsupportedFormatError(ConfigError):
    """Export or ingestion format not available for the given object."""


class DataFormatError(PmeError):
    """Malformed input file."""

    exit_code = 4

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        if line is not None:
            message = f"{message} (line {line})"
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message, {"line": line, "path": path})
        self.line = line


class NumericalError(PmeError):
    """Any numerical failure."""

    exit_code = 3


class ConvergenceError(NumericalError):
    pass


class DegenerateError(NumericalError):
    pass


class SplineSolveError(NumericalError):
    pass


class ProjectionError(NumericalError):
    pass


class GraphDisconnectedError(NumericalError):
    def __init__(self, component_sizes: List[int]):
        sizes = ", ".join(str(s) for s in component_sizes)
        super().__init__(
            f"neighbour graph has {len(component_sizes)} components (sizes {sizes}); "
            f"increase the ISOMAP neighbour count k",
            {"component_sizes": component_sizes},
        )
        self.component_sizes = component_sizes


class SelectionError(NumericalError):
    """Model-size or tuning-parameter selection failed; `trace` keeps what was tried."""

    def __init__(self, message: str, trace: Optional[list] = None):
        super().__init__(message, {"trace": trace or []})
        self.trace = trace or []


class PmeIterationError(NumericalError):
    """Failure inside the projection/adaptation loop, with the loop state attached."""

    def __init__(self, message: str, iteration: int, trace: List[float]):
        super().__init__(message, {"iteration": iteration, "trace": list(trace)})
        self.iteration = iteration
        self.trace = list(trace)


class ChartInversionError(NumericalError):
    pass


class PartitionError(NumericalError):
    pass


class ClassificationError(NumericalError):
    pass


class GridMismatchError(NumericalError):
    pass
