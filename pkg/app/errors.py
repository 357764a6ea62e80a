from typing import Any, Dict, Optional


class PoseSynthError(Exception):
    """Base class for every error raised by the package.

    `exit_code` is the status the CLI returns when the error reaches `main()`.
    """

    exit_code = 1


class ConfigurationError(PoseSynthError):
    """Invalid configuration, mismatched checkpoint or missing input path."""

    exit_code = 2


class DomainError(ConfigurationError, ValueError):
    """Input outside the domain of a geometric operation (e.g. tz <= 0)."""


class ShapeError(ConfigurationError, ValueError):
    """Tensor shape incompatible with the operation or the trained model."""


class DatasetError(PoseSynthError):
    """Malformed manifest, results file or dataset directory."""

    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        where = ""
        if path:
            where = f"{path}"
            if line_number is not None:
                where += f":{line_number}"
            where += ": "
        super().__init__(f"{where}{message}")


class TrainingError(PoseSynthError):
    """Training diverged; `snapshot` holds the diagnostic state at the failing step."""

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        self.snapshot = snapshot or {}
        super().__init__(message)


class FitFailure(PoseSynthError):
    """Raised by the CLI (never by `fit`) when every restart diverged."""
