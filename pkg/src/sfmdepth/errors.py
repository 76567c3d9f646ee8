"""Exception hierarchy shared across the package.

Three broad groups matter to callers (and to the CLI's exit codes):
configuration problems, data problems, and numerical problems.  Everything
derives from :class:`SfmDepthError` so library users can catch one base.
"""


class SfmDepthError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SfmDepthError):
    """Invalid or contradictory configuration values."""


class DataError(SfmDepthError):
    """Problems with input data: files, annotations, datasets."""


class ParseError(DataError):
    """A file does not conform to its declared format."""


class ManifestError(DataError):
    """A dataset manifest references missing or inconsistent files."""


class VersionError(DataError):
    """A file or manifest declares an unsupported schema version."""


class ReferentialIntegrityError(DataError):
    """An observation or record references an unknown frame."""


class SceneCoverageError(DataError):
    """Too many camera rays miss the scene surface during rendering."""


class InsufficientParallax(DataError):
    """Too few simulated points are visible in two or more frames."""


class InsufficientObservations(DataError):
    """A point has fewer than the two observations triangulation needs."""


class EmptyAnnotation(DataError):
    """A frame carries no sparse depth annotations at all."""


class EmptyDataset(DataError):
    """A training run was requested on a dataset with no usable pairs."""


class EmptyCloud(DataError):
    """A depth map yielded no valid points to convert to a cloud."""


class WarpOutOfView(DataError):
    """Warping a depth map left no valid pixels in the target frame."""


class ModelConfigError(DataError):
    """Stored model parameters do not match the receiving model's config."""


class DegenerateAlignment(DataError):
    """Point correspondences are collinear or coincident; alignment is
    underdetermined."""


class ShapeError(SfmDepthError):
    """Tensor or raster shapes are incompatible for the requested op."""


class NumericalError(SfmDepthError):
    """A computation produced NaN/Inf or left its numerical domain."""


class PointBehindCamera(SfmDepthError):
    """A 3D point with non-positive depth cannot be projected."""


class InvalidDepth(SfmDepthError):
    """A non-positive depth value cannot be unprojected."""
