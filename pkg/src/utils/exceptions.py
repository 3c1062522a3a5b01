class AppError(Exception):
    """Base exception class for the application."""
    pass

class ValidationError(AppError):
    """Custom exception for input and configuration validation errors."""
    pass

class InvalidFileType(ValidationError):
    """Raised when an input image has an extension outside the allowed list."""
    pass

class SetTooSmallError(ValidationError):
    """Raised when an image directory holds fewer than two usable images."""
    pass

class ImageDecodeError(ValidationError):
    """Raised when an image file cannot be decoded. Carries the filename."""

    def __init__(self, filename: str, message: str | None = None):
        self.filename = filename
        super().__init__(message or f"Could not decode image file: {filename}")

class GroundTruthError(ValidationError):
    """Raised when a ground-truth mask has the wrong size or unknown codes."""
    pass

class ConfigError(ValidationError):
    """Raised when a run configuration key or value is invalid."""
    pass

class GeometryError(AppError):
    """Base class for epipolar geometry failures."""
    pass

class TooFewMatchesError(GeometryError):
    """Raised when fewer than eight correspondences reach the estimator."""
    pass

class NoConsensusError(GeometryError):
    """Raised when RANSAC does not meet the pair acceptance rule."""
    pass

class DegenerateLineError(GeometryError):
    """Raised when a point maps to the null line (it is the epipole)."""
    pass

class InvalidPencilMemberError(GeometryError):
    """Raised when a line does not pass through the epipole of its image."""
    pass

class DegeneratePatchError(AppError):
    """Raised when a patch quadrilateral has (near) zero area."""
    pass

class ContractViolation(AppError):
    """Raised when an operation is called outside its documented domain."""
    pass

class SceneInvalidError(AppError):
    """Raised when a synthetic scene cannot be rendered as described."""
    pass

class NoSupportError(AppError):
    """Raised when no image pair in the set has accepted epipolar geometry."""

    def __init__(self, message: str, failures: dict | None = None):
        self.failures = failures or {}
        super().__init__(message)
