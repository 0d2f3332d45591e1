"""Exception hierarchy shared by the service, controller and entry-point layers.

Every error raised on purpose by the services derives from ``ValueError`` so
callers that only know the built-in type keep working; controllers translate
the specific subclasses into HTTP responses or CLI exit codes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional


class PopgradError(ValueError):
    """Base class for all deliberate failures raised by this package."""


class DomainError(PopgradError):
    """An input violates an operation's precondition (zero norm, bad angle, shape mismatch)."""


class CapabilityError(PopgradError):
    """The operation is not defined for the requested size (for example ``d < K + 2``)."""


class SingularSystemError(DomainError):
    """A linear system is too ill-conditioned to solve reliably."""

    def __init__(self, message: str, *, condition: float) -> None:
        super().__init__(message)
        self.condition = condition


class ConfigValidationError(PopgradError):
    """An experiment configuration failed validation.

    ``fields`` lists one ``{"field": ..., "message": ...}`` entry per offending key.
    """

    def __init__(self, message: str, *, fields: Optional[List[Dict[str, str]]] = None) -> None:
        super().__init__(message)
        self.fields = fields or []


class ArtifactWriteError(PopgradError):
    """Writing an experiment artifact to disk failed."""

    def __init__(self, message: str, *, path: Path) -> None:
        super().__init__(f"{message}: {path}")
        self.path = path


__all__ = [
    "PopgradError",
    "DomainError",
    "CapabilityError",
    "SingularSystemError",
    "ConfigValidationError",
    "ArtifactWriteError",
]
