"""Exception hierarchy.

``ValidationError`` subclasses map to CLI exit code 1, everything else
under ``DarkselectError`` (I/O, subprocesses, missing artifacts) to 2.
"""


class DarkselectError(Exception):
    pass


class ValidationError(DarkselectError, ValueError):
    pass


class ManifestError(ValidationError):
    pass


class MatrixFormatError(ValidationError):
    pass


class AlignmentError(ValidationError):
    pass


class UnemittableError(AlignmentError):
    """The token sequence cannot be emitted within the available frames."""


class ScorerError(DarkselectError):
    pass


class MissingArtifactError(DarkselectError, FileNotFoundError):
    pass
