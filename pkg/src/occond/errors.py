"""Exception types shared across the package."""


class OccondError(Exception):
    """Base class for all package errors."""


class ShapeDimensionError(OccondError):
    """Shape coefficient vector does not match the model's basis count."""


class PoseDimensionError(OccondError):
    """Pose joint count does not match the model's skeleton."""


class SceneValidationError(OccondError):
    """A scene violates one or more invariants.

    Carries ``violations``, a list of ``(path, message)`` pairs where path
    points into the scene document (e.g. ``"humans[0].beta"``).
    """

    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = list(violations)
        lines = "; ".join(f"{path}: {msg}" for path, msg in self.violations)
        super().__init__(f"scene validation failed: {lines}")


class SchemaError(OccondError):
    """A structured document violates its schema; message names the JSON path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
