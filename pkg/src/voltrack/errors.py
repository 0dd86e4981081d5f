"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/volume shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A caller violated an operation's contract (non-scalar backward, bad config, ...)."""


class CorruptVolumeError(IOError):
    """Raw volume payload disagrees with its sidecar metadata."""


class MissingMetadataError(IOError):
    """Raw volume file has no readable sidecar."""
