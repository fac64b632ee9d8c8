"""Exception types shared across the package.

Argument-level misuse (bad stride values, epoch out of range, too few boxes
for k-means) raises plain ValueError; the classes below mark problems with
data that flows between components: tensor shapes, network descriptions, and
files on disk.
"""


class MffdError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MffdError):
    """Tensor or weight shapes are inconsistent with the requested operation."""


class ConfigError(MffdError):
    """A network description is structurally invalid."""


class FormatError(MffdError):
    """A file (image, label, weights, config) could not be parsed.

    Messages include a position (byte offset or line number) where known.
    """


class DivergenceError(MffdError):
    """Training produced a non-finite loss."""
