"""Exception hierarchy shared by the library and the CLI.

Each class maps to one CLI exit code so failure classes stay disjoint.
"""


class FasError(Exception):
    exit_code = 1


class ConfigError(FasError, ValueError):
    exit_code = 2


class DataError(FasError, ValueError):
    exit_code = 3


class FeatureFileError(DataError):
    """Malformed ``.fasf`` container. ``field`` names the offending header field."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class BadMagicError(FeatureFileError):
    pass


class VersionError(FeatureFileError):
    pass


class TruncatedError(FeatureFileError):
    pass


class ManifestError(DataError):
    """Manifest validation failure carrying every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems) if problems else "invalid manifest")
        self.problems = list(problems)


class NumericError(FasError, ArithmeticError):
    """A non-finite value was produced; ``op`` names the producing operation."""

    exit_code = 4

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class ShapeError(FasError, ValueError):
    exit_code = 5


class IncompatibleError(FasError, ValueError):
    exit_code = 5


class CheckpointError(IncompatibleError):
    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field
