"""Exception hierarchy shared across the package."""


class GsreconError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(GsreconError):
    """Invalid or inconsistent run configuration."""


class DataError(GsreconError):
    """Input data could not be loaded or validated."""


class NumericError(GsreconError):
    """An optimization or numeric routine failed."""


# -- geometry ---------------------------------------------------------------

class NonPositiveDepth(NumericError):
    """A point projected behind or onto the camera plane."""


class DegenerateGeodesic(NumericError):
    """Relative rotation angle too close to pi for a unique geodesic."""


# -- images / rendering -----------------------------------------------------

class DimensionMismatch(DataError):
    """Two images (or an image and intrinsics) disagree on size."""


class ImageTooSmall(DataError):
    """Image smaller than the metric's window."""


# -- posing / training ------------------------------------------------------

class EmptyDepth(DataError):
    """Depth map carries no valid samples to unproject."""


class Diverged(NumericError):
    """Photometric optimization diverged."""

    def __init__(self, message, pair_index=None):
        super().__init__(message)
        self.pair_index = pair_index


class InfeasiblePartition(ConfigError):
    """Segment constraints cannot be satisfied for the requested level."""


class MissingPose(DataError):
    """A required (half-)frame index has no pose in the trajectory."""


# -- metrics ----------------------------------------------------------------

class LengthMismatch(DataError):
    """Trajectories differ in length."""


class DegenerateConfiguration(NumericError):
    """Camera centers are (near-)collinear; alignment is ill-posed."""


# -- data -------------------------------------------------------------------

class InvalidSpec(ConfigError):
    """Scene generator parameters out of range."""


class TooFewFrames(DataError):
    """Not enough frames for the requested split mode."""


class ParseError(DataError):
    """Malformed manifest/trajectory/checkpoint file."""

    def __init__(self, message, path=None, line=None):
        if path is not None:
            loc = f"{path}:{line}" if line is not None else str(path)
            message = f"{loc}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class MissingFile(DataError):
    """A referenced file does not exist."""
