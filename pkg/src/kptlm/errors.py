"""Exception types raised across the package."""


class KptlmError(Exception):
    """Base class; ``code`` is used by the command line for the exit record."""

    code = "error"


class ShapeError(KptlmError, ValueError):
    code = "shape"


class ConfigError(KptlmError, ValueError):
    code = "config"


class EmptySupervisionError(KptlmError, ValueError):
    code = "empty_supervision"


class NonFiniteGradientError(KptlmError, FloatingPointError):
    code = "non_finite_gradient"

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class DomainError(KptlmError, ValueError):
    code = "domain"


class CoordParseError(KptlmError, ValueError):
    code = "parse"

    def __init__(self, message: str, fragment: str):
        super().__init__(f"{message}: {fragment!r}")
        self.fragment = fragment


class RegistryError(KptlmError, KeyError):
    code = "registry"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ContextOverflowError(KptlmError, ValueError):
    code = "context_overflow"


class TrainingError(KptlmError, RuntimeError):
    code = "training"


class SchemaError(KptlmError, ValueError):
    code = "schema"

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class MissingPredictionError(KptlmError, KeyError):
    code = "missing_prediction"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ZeroVarianceSamplerError(KptlmError, ValueError):
    code = "zero_variance"
