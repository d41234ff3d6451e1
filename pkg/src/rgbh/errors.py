"""Exception hierarchy shared by all rgbh modules.

Every error raised on purpose by this package derives from ToolkitError so
the CLI can catch one type and emit a machine-readable JSON blob on stderr.
"""


class ToolkitError(Exception):
    """Base class for all rgbh errors."""

    def payload(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


# --- tensor engine ---------------------------------------------------------

class ShapeMismatch(ToolkitError):
    pass


class RangeOutOfBounds(ToolkitError):
    pass


class NotScalarRoot(ToolkitError):
    pass


class TapeConsumed(ToolkitError):
    pass


class NonFiniteValue(ToolkitError):
    """An operation produced NaN/Inf (overflow is an error, never silent)."""


# --- models ----------------------------------------------------------------

class IndivisibleSpatialExtent(ToolkitError):
    pass


class ChannelMismatch(ToolkitError):
    pass


class TokenCountMismatch(ToolkitError):
    pass


class ModalityMissing(ToolkitError):
    pass


class AllPixelsIgnored(ToolkitError):
    pass


# --- metrics ---------------------------------------------------------------

class LabelOutOfRange(ToolkitError):
    pass


class ClassCountMismatch(ToolkitError):
    pass


# --- raster pipeline -------------------------------------------------------

class EmptyCloud(ToolkitError):
    pass


class NoGroundPoints(ToolkitError):
    pass


class NoOverlapWithGrid(ToolkitError):
    pass


class GridSpecMismatch(ToolkitError):
    pass


# --- stats -----------------------------------------------------------------

class MixedTileSizes(ToolkitError):
    pass


class UnknownGroup(ToolkitError):
    pass


# --- harness ---------------------------------------------------------------

class ConfigInvalid(ToolkitError):
    pass


class DatasetMissing(ToolkitError):
    pass


class CheckpointCorrupt(ToolkitError):
    pass
