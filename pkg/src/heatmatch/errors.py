"""Exception types shared across the toolkit.

Every error carries a short machine-parsable ``category`` so the CLI can
report failures as ``error <category>: message`` with a nonzero exit code.
"""


class ToolkitError(Exception):
    category = "internal"


class ConfigError(ToolkitError):
    category = "config"


class MeshError(ToolkitError):
    """Parse or validation failure of a mesh file."""

    category = "mesh"

    def __init__(self, message, path=None, line=None):
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class CacheError(ToolkitError):
    category = "cache"


class SpectralError(ToolkitError):
    category = "spectral"


class GeodesicError(ToolkitError):
    category = "geodesic"


class DescriptorError(ToolkitError):
    category = "descriptor"


class TrainingError(ToolkitError):
    category = "train"


class EvaluationError(ToolkitError):
    category = "evaluate"
