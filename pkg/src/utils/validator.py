import os
from src import config
from src.utils.exceptions import (
    ConfigError,
    InvalidFileType,
    ValidationError,
)
from src.logging_config import logger


class Validator:
    """
    A class to handle all input validation for the application.
    """

    @staticmethod
    def validate_directory(directory_path: str):
        """
        Raises:
            ValidationError: If the path does not exist or is not a directory.
        """
        if not os.path.isdir(directory_path):
            logger.error(f"Validation failed: Directory not found at {directory_path}")
            raise ValidationError(f"Directory not found at path: {directory_path}")

    @staticmethod
    def validate_image_file(file_path: str):
        """
        Validates an image file's existence and type before decoding.

        Args:
            file_path: The path to the image file.

        Raises:
            ValidationError: If the file does not exist.
            InvalidFileType: If the file extension is not in the allowed list.
        """
        if not os.path.exists(file_path):
            logger.error(f"Validation failed: File not found at {file_path}")
            raise ValidationError(f"File not found at path: {file_path}")

        _, ext = os.path.splitext(file_path)
        if ext.lower() not in config.ALLOWED_IMAGE_EXTENSIONS:
            logger.warning(
                f"Validation failed: Invalid file type '{ext}' for {file_path}"
            )
            raise InvalidFileType(
                f"Invalid file type. Allowed types are: "
                f"{', '.join(config.ALLOWED_IMAGE_EXTENSIONS)}"
            )

    @staticmethod
    def validate_image_dimensions(name: str, width: int, height: int):
        if width < config.MIN_IMAGE_SIDE or height < config.MIN_IMAGE_SIDE:
            logger.warning(f"Validation failed: Image {name} is {width}x{height}")
            raise ValidationError(
                f"Image {name} is {width}x{height}; both sides must be at least "
                f"{config.MIN_IMAGE_SIDE} pixels."
            )

    @staticmethod
    def validate_unique_ids(ids: list[str]):
        seen = set()
        for image_id in ids:
            if image_id in seen:
                raise ValidationError(f"Duplicate image id '{image_id}' in set.")
            seen.add(image_id)

    @staticmethod
    def validate_run_config(run_config) -> None:
        """
        Checks every numeric field of a RunConfig against its documented range.

        Raises:
            ConfigError: Naming the first offending key.
        """
        def require(condition: bool, key: str, rule: str):
            if not condition:
                value = getattr(run_config, key)
                logger.error(f"Validation failed: config key '{key}'={value!r} violates {rule}")
                raise ConfigError(f"Invalid configuration: '{key}'={value!r} must satisfy {rule}.")

        rc = run_config
        require(4 <= rc.target_height <= 256, "target_height", "4 <= value <= 256")
        require(len(rc.candidate_widths) >= 1 and all(w > 0 for w in rc.candidate_widths),
                "candidate_widths", "one or more positive factors")
        require(rc.exclusion_factor >= 0, "exclusion_factor", "value >= 0")
        require(rc.canonical_size >= 8 and rc.canonical_size % 2 == 0, "canonical_size", "even and >= 8")
        require(len(rc.descriptors) >= 1 and set(rc.descriptors) <= {"hog", "hs_hist"},
                "descriptors", "a non-empty subset of {hog, hs_hist}")
        require(rc.hog_weight > 0, "hog_weight", "value > 0")
        require(rc.hs_weight > 0, "hs_weight", "value > 0")
        require(rc.hs_bins >= 1, "hs_bins", "value >= 1")
        require(rc.ransac_threshold > 0, "ransac_threshold", "value > 0")
        require(rc.ransac_max_iterations >= 1, "ransac_max_iterations", "value >= 1")
        require(0 < rc.ransac_confidence < 1, "ransac_confidence", "0 < value < 1")
        require(rc.min_inliers >= 8, "min_inliers", "value >= 8")
        require(0 < rc.min_inlier_ratio <= 1, "min_inlier_ratio", "0 < value <= 1")
        require(rc.harris_max_corners >= 8, "harris_max_corners", "value >= 8")
        require(rc.ncc_window >= 3 and rc.ncc_window % 2 == 1, "ncc_window", "odd and >= 3")
        require(0 < rc.ncc_ratio <= 1, "ncc_ratio", "0 < value <= 1")
        require(rc.max_support >= 0, "max_support", "value >= 0")
        require(rc.threshold_protocol in config.THRESHOLD_PROTOCOLS, "threshold_protocol",
                f"one of {', '.join(config.THRESHOLD_PROTOCOLS)}")
        require(0 <= rc.threshold <= 1, "threshold", "0 <= value <= 1")
        require(rc.threads >= 1, "threads", "value >= 1")
        logger.info("Run configuration validated.")
