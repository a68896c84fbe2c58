"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class ArtifactError(Exception):
    exit_code = 1


class ConfigError(ArtifactError, ValueError):
    """Bad configuration key, value or schema."""

    exit_code = 30


class ValidationError(ArtifactError, ValueError):
    """Parameter outside its documented range."""

    exit_code = 31


class InputError(ArtifactError, FileNotFoundError):
    """A required input file or run directory is missing."""

    exit_code = 40


class DataFormatError(ArtifactError, ValueError):
    """Malformed on-disk data."""

    exit_code = 50


class EmptyDatasetError(DataFormatError):
    exit_code = 51


class TrainingError(ArtifactError, RuntimeError):
    exit_code = 60
