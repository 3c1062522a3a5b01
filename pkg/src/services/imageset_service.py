import os
from dataclasses import dataclass
from enum import IntEnum

import cv2
import numpy as np

from src import config
from src.utils.exceptions import GroundTruthError, ImageDecodeError, SetTooSmallError, ValidationError
from src.utils.validator import Validator
from src.logging_config import logger


class Label(IntEnum):
    STATIC = 0
    DYNAMIC = 1
    DONT_CARE = 2


@dataclass(frozen=True)
class Image:
    """An 8-bit RGB image, row-major, shared read-only between workers."""
    id: str
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels.setflags(write=False)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def as_float(self) -> np.ndarray:
        """RGB scaled to [0, 1] as float32."""
        return self.pixels.astype(np.float32) / 255.0


@dataclass(frozen=True)
class ImageSet:
    name: str
    images: tuple

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def ids(self) -> list[str]:
        return [image.id for image in self.images]

    def get(self, image_id: str) -> Image:
        for image in self.images:
            if image.id == image_id:
                return image
        raise KeyError(image_id)


@dataclass(frozen=True)
class GroundTruthMask:
    """Per-pixel trinary labels (values of `Label`) for one image."""
    image_id: str
    labels: np.ndarray

    def __post_init__(self):
        self.labels.setflags(write=False)

    @property
    def dynamic(self) -> np.ndarray:
        return self.labels == Label.DYNAMIC

    @property
    def dont_care(self) -> np.ndarray:
        return self.labels == Label.DONT_CARE

    def counts(self) -> dict[str, int]:
        return {label.name.lower(): int(np.count_nonzero(self.labels == label)) for label in Label}

    def to_codes(self) -> np.ndarray:
        """Encodes the labels back into the single-channel PNG codes."""
        codes = np.full(self.labels.shape, config.GT_STATIC_CODE, dtype=np.uint8)
        codes[self.labels == Label.DYNAMIC] = config.GT_DYNAMIC_CODE
        codes[self.labels == Label.DONT_CARE] = config.GT_DONT_CARE_CODE
        return codes


class ImageSetService:
    """
    Loads and validates image collections and their ground-truth masks.
    """

    @staticmethod
    def read_image(file_path: str) -> Image:
        """
        Decodes one PNG or JPEG file into an RGB `Image`.

        Raises:
            InvalidFileType: If the extension is not allowed.
            ImageDecodeError: If the file cannot be decoded.
            ValidationError: If the image is smaller than the minimum size.
        """
        Validator.validate_image_file(file_path)
        bgr = cv2.imread(file_path, cv2.IMREAD_COLOR)
        if bgr is None:
            logger.error(f"Could not decode image file {file_path}")
            raise ImageDecodeError(os.path.basename(file_path))
        rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
        Validator.validate_image_dimensions(os.path.basename(file_path), rgb.shape[1], rgb.shape[0])
        image_id = os.path.splitext(os.path.basename(file_path))[0]
        return Image(id=image_id, pixels=np.ascontiguousarray(rgb))

    @staticmethod
    def save_image(image: Image, file_path: str):
        """Writes an image losslessly when the path ends in .png."""
        os.makedirs(os.path.dirname(file_path) or ".", exist_ok=True)
        if not cv2.imwrite(file_path, cv2.cvtColor(np.asarray(image.pixels), cv2.COLOR_RGB2BGR)):
            raise ValidationError(f"Failed to write image to {file_path}")

    def load_image_set(self, directory_path: str) -> ImageSet:
        """
        Loads every PNG/JPEG file of a directory, ordered by filename.

        Raises:
            ValidationError: If the directory does not exist or ids collide.
            ImageDecodeError: If a file cannot be decoded (names the file).
            SetTooSmallError: If fewer than two images are found.
        """
        logger.info(f"Loading image set from: {directory_path}")
        Validator.validate_directory(directory_path)

        names = sorted(
            name for name in os.listdir(directory_path)
            if os.path.splitext(name)[1].lower() in config.ALLOWED_IMAGE_EXTENSIONS
            and os.path.isfile(os.path.join(directory_path, name))
        )
        if len(names) < config.MIN_SET_SIZE:
            logger.error(f"Image set at {directory_path} holds {len(names)} image(s).")
            raise SetTooSmallError(
                f"An image set needs at least {config.MIN_SET_SIZE} images; "
                f"found {len(names)} in {directory_path}."
            )

        images = [self.read_image(os.path.join(directory_path, name)) for name in names]
        Validator.validate_unique_ids([image.id for image in images])
        for image in images:
            logger.info(f"Loaded image '{image.id}' ({image.width}x{image.height})")

        name = os.path.basename(os.path.normpath(directory_path))
        return ImageSet(name=name, images=tuple(images))

    def load_ground_truth(self, mask_path: str, image: Image) -> GroundTruthMask:
        """
        Reads a single-channel mask: 0 = static, 255 = dynamic, 128 = don't care.

        Raises:
            GroundTruthError: On unreadable masks, size mismatch or unknown codes.
        """
        codes = cv2.imread(mask_path, cv2.IMREAD_UNCHANGED)
        if codes is None:
            raise GroundTruthError(f"Could not read ground-truth mask: {mask_path}")
        if codes.ndim == 3:
            # Accept gray masks saved with replicated channels
            if not all(np.array_equal(codes[..., 0], codes[..., c]) for c in range(1, codes.shape[2])):
                raise GroundTruthError(f"Ground-truth mask {mask_path} is not single-channel.")
            codes = codes[..., 0]
        return self.ground_truth_from_codes(codes, image, source=mask_path)

    @staticmethod
    def ground_truth_from_codes(codes: np.ndarray, image: Image, source: str = "<array>") -> GroundTruthMask:
        if codes.shape != image.shape:
            raise GroundTruthError(
                f"Ground-truth mask {source} is {codes.shape[1]}x{codes.shape[0]} "
                f"but image '{image.id}' is {image.width}x{image.height}."
            )
        known = np.isin(codes, [config.GT_STATIC_CODE, config.GT_DONT_CARE_CODE, config.GT_DYNAMIC_CODE])
        if not known.all():
            bad = sorted(int(v) for v in np.unique(codes[~known]))[:5]
            raise GroundTruthError(f"Ground-truth mask {source} has unknown code values {bad}.")

        labels = np.full(codes.shape, Label.STATIC, dtype=np.uint8)
        labels[codes == config.GT_DYNAMIC_CODE] = Label.DYNAMIC
        labels[codes == config.GT_DONT_CARE_CODE] = Label.DONT_CARE
        return GroundTruthMask(image_id=image.id, labels=labels)

    def load_ground_truth_dir(self, gt_dir: str, image_set: ImageSet) -> dict[str, GroundTruthMask]:
        """Loads `<image-id>.png` masks that exist; images without one are skipped."""
        masks = {}
        for image in image_set:
            path = os.path.join(gt_dir, f"{image.id}.png")
            if os.path.exists(path):
                masks[image.id] = self.load_ground_truth(path, image)
            else:
                logger.warning(f"No ground-truth mask for image '{image.id}' in {gt_dir}")
        logger.info(f"Loaded {len(masks)} ground-truth mask(s) from {gt_dir}")
        return masks
