"""Exception hierarchy shared by every invarlab module."""


class InvarError(Exception):
    """Base class for all invarlab errors."""


class ConfigError(InvarError, ValueError):
    """Invalid parameter, unknown name or malformed configuration."""


class IoError(InvarError, OSError):
    """A required file or directory is missing or unreadable."""


class FormatError(InvarError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyGeometryError(InvarError, ValueError):
    pass


class OutOfCanvasError(InvarError, ValueError):
    """A geometric 2D transform would push foreground pixels off the canvas."""


class InsufficientSamplesError(InvarError, RuntimeError):
    pass


class ShapeError(InvarError, ValueError):
    pass


class TrainingDivergedError(InvarError, RuntimeError):
    pass


class DegenerateVectorError(InvarError, ValueError):
    pass


class DegenerateUniformityError(InvarError, ValueError):
    """Uniformity is so close to 1 that the adjusted invariance is undefined."""


class EmptyRunError(InvarError, RuntimeError):
    pass


class StageError(InvarError, RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {message}")
