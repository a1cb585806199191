"""
Exception hierarchy shared by the library layers.

Library code raises these; only the experiment controller turns them into
process exit codes.
"""

from typing import Any, Dict, Optional, Tuple


class LabError(Exception):
    """Base class for every error raised by the laboratory."""


class AdmissibilityError(LabError, ValueError):
    """A Hessian block that must be positive definite is not."""

    def __init__(self, message: str, location: Optional[Tuple[int, ...]] = None,
                 eigenvalue: Optional[float] = None):
        super().__init__(message)
        self.location = location
        self.eigenvalue = eigenvalue

    def __str__(self):
        parts = [self.args[0]]
        if self.location is not None:
            parts.append(f"at {self.location}")
        if self.eigenvalue is not None:
            parts.append(f"eigenvalue={self.eigenvalue:.6e}")
        return " ".join(parts)


class NonFiniteInput(LabError, ValueError):
    """A sampled field contains NaN or inf."""

    def __init__(self, message: str, location: Optional[Tuple[int, ...]] = None):
        super().__init__(message)
        self.location = location

    def __str__(self):
        if self.location is None:
            return self.args[0]
        return f"{self.args[0]} at {self.location}"


class DomainTruncationError(LabError):
    """A fiber integrand has not decayed at the end of the log chart."""

    def __init__(self, message: str, boundary_value: float = 0.0):
        super().__init__(message)
        self.boundary_value = boundary_value


class FlowStalled(LabError):
    """Backtracking hit dt_min without an admissible descent step."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Unsupported(LabError):
    """Input shape outside what the models implement."""


class ConfigError(LabError):
    """Malformed or invalid experiment configuration."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line = line

    def __str__(self):
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.field:
            where.append(f"field '{self.field}'")
        if not where:
            return self.args[0]
        return f"{self.args[0]} ({', '.join(where)})"


class InvariantViolation(LabError):
    """A checked property failed."""

    def __init__(self, message: str, check: str = ""):
        super().__init__(message)
        self.check = check
