"""Exception types shared across the engine."""


class SvxError(Exception):
    """Base class for all svx errors."""


class ShapeMismatch(SvxError):
    """Array shapes or row counts disagree."""


class ChannelMismatch(SvxError):
    """Feature width does not match a layer's input/output channels."""


class OutOfExtent(SvxError):
    """A coordinate lies outside the valid grid bounds."""


class DuplicateCoordinates(SvxError):
    """Duplicate coordinates supplied without requesting a merge."""


class InactiveQuery(SvxError):
    """A selected coordinate is not active in the feature tensor."""


class NoActiveVoxels(SvxError):
    """Target assignment was asked to run on a frame with no active sites."""


class NonMonotoneTimestamp(SvxError):
    """Tracker frames must be processed in strictly increasing time order."""


class DegenerateBox(SvxError):
    """A box with a non-positive size cannot be intersected."""


class FormatError(SvxError):
    """Base class for binary file-format failures."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(FormatError):
    """File format version is not understood by this build."""


class TruncatedFile(FormatError):
    """File is shorter than its header implies."""


class MissingTensor(FormatError):
    """A tensor required by the model configuration is absent."""


class UnknownTensor(FormatError):
    """A tensor name not present in the model configuration was found."""


class EmptyFrameWarning(UserWarning):
    """Voxelization produced zero occupied voxels (signal, not a failure)."""
