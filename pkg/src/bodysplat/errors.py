"""Exception types shared across the pipeline."""


class BodySplatError(Exception):
    """Base class for all pipeline errors."""


class InvalidParameterError(BodySplatError, ValueError):
    """An input violates a documented precondition (shape, range, finiteness)."""


class UnsupportedDegreeError(InvalidParameterError):
    """Spherical-harmonics degree outside the supported range."""


class DegenerateInitializationError(BodySplatError):
    """Point set too degenerate to seed Gaussians from (e.g. all vertices coincide)."""


class DegenerateDeformationError(BodySplatError):
    """A blended skinning matrix collapsed (near-zero determinant)."""

    def __init__(self, index: int, det: float):
        self.index = index
        self.det = det
        super().__init__(
            f"deformation matrix for gaussian {index} is degenerate (det={det:.3e})"
        )


class InsufficientPointsError(BodySplatError):
    """Fewer points than required (e.g. N <= k for a kNN graph)."""


class StaleGraphError(BodySplatError):
    """Neighbor graph no longer matches the canonical positions it was built from."""


class DatasetError(BodySplatError):
    """Manifest, image, or model-asset problem; message carries the offending path."""
