"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or dimensions violate an operation's contract."""


class DatasetError(RuntimeError):
    """A dataset directory, manifest, or raw/sidecar pair is inconsistent."""


class AlignmentError(RuntimeError):
    """Homography estimation failed to reach consensus."""


class InsufficientFeaturesError(AlignmentError):
    """Too few detectable corners or surviving matches to attempt alignment."""
