"""Exception hierarchy shared across the package."""


class SplatDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(SplatDistillError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(SplatDistillError, ValueError):
    """Numerically degenerate input (e.g. normalizing a near-zero vector)."""


class RangeError(SplatDistillError, ValueError):
    """Scalar argument outside its documented range."""


class GradError(SplatDistillError, RuntimeError):
    """Gradient-related usage error (e.g. optimizer step without a grad)."""


class CheckpointError(SplatDistillError, ValueError):
    """Malformed checkpoint file."""


class PlyParseError(SplatDistillError, ValueError):
    """Malformed PLY file; message names the offending property or section."""


class ConfigError(SplatDistillError, ValueError):
    """Invalid configuration file or override."""


class InitializationError(SplatDistillError, RuntimeError):
    """Splat position initialization failed (e.g. empty isosurface)."""


class TeacherFitError(SplatDistillError, RuntimeError):
    """Teacher fitting did not converge; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDivergedError(SplatDistillError, RuntimeError):
    """Training loss became non-finite; carries the diagnostics dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
