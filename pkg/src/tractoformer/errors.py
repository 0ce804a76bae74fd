"""Exception types shared across the package."""


class TractoError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(TractoError, ValueError):
    pass


class InvalidConfig(InvalidArgument):
    pass


class InvalidSpec(InvalidArgument):
    pass


class FitSingularError(TractoError):
    pass


class OutOfBounds(TractoError):
    """A world point (or one of its neighbours) falls outside the voxel grid."""


class FormatError(TractoError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(TractoError):
    pass


class ConfigMismatch(CheckpointError):
    pass


class StaleTrace(TractoError):
    pass


class ContextOverflow(TractoError):
    pass


class TrainingDiverged(TractoError):
    def __init__(self, tensor: str):
        super().__init__(f"non-finite gradient in tensor {tensor!r}")
        self.tensor = tensor
