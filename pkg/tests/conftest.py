import numpy as np
import pytest

from src.services.geometry_service import REFERENCE, SUPPORT, FundamentalMatrix, GeometryService, PairGeometry
from src.services.imageset_service import Image
from src.services.synthetic_service import SyntheticService


def make_image(image_id: str, pixels: np.ndarray) -> Image:
    return Image(id=image_id, pixels=np.ascontiguousarray(pixels, dtype=np.uint8))


def noise_image(image_id: str, width: int, height: int, seed: int = 0) -> Image:
    """Random colour texture, smoothed a little so gradients stay meaningful."""
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 256, size=(height // 2 + 1, width // 2 + 1, 3)).astype(np.uint8)
    pixels = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)[:height, :width]
    return make_image(image_id, pixels)


def rectified_geometry(reference_id: str = "a", support_id: str = "b") -> PairGeometry:
    """Pure horizontal translation: y_sup == y_ref, epipoles at infinity along x."""
    F = FundamentalMatrix.from_array([[0, 0, 0], [0, 0, -1], [0, 1, 0]])
    return PairGeometry(
        reference_id=reference_id,
        support_id=support_id,
        F=F,
        e_ref=GeometryService.epipole_of(F, REFERENCE),
        e_sup=GeometryService.epipole_of(F, SUPPORT),
        source="file",
    )


@pytest.fixture(scope="session")
def synthetic_service():
    return SyntheticService()


@pytest.fixture(scope="session")
def basic_scene(synthetic_service):
    return synthetic_service.build_scene("basic", seed=7, width=320, height=240)


@pytest.fixture(scope="session")
def basic_render(synthetic_service, basic_scene):
    return synthetic_service.render(basic_scene)
