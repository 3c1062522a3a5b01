import math

import cv2
import numpy as np
import pytest

from src.services.descriptor_service import DescriptorKind, DescriptorService
from src.services.geometry_service import Epipole, GeometryService
from src.services.patch_service import EpipolarPatch, PatchService, clip_polygon, image_extent, polygon_area
from src.utils.exceptions import DegeneratePatchError
from tests.conftest import make_image, noise_image, rectified_geometry


@pytest.fixture
def service():
    return PatchService()


@pytest.fixture(scope="module")
def rectified_patches():
    image = make_image("a", np.zeros((480, 640, 3), np.uint8))
    service = PatchService()
    pencil = service.build_pencil(image, rectified_geometry().e_ref)
    return pencil, service.decompose_reference(image, pencil)


def quad(x0, y0, w, h):
    return np.array([
        [x0 - 0.5, y0 - 0.5],
        [x0 + w - 0.5, y0 - 0.5],
        [x0 + w - 0.5, y0 + h - 0.5],
        [x0 - 0.5, y0 + h - 0.5],
    ])


def line_distance(line, points):
    points = np.atleast_2d(points)
    return np.abs(points @ line[:2] + line[2]) / np.hypot(line[0], line[1])


def test_rectified_pencil_has_thirty_rows_per_family(rectified_patches):
    pencil, _ = rectified_patches

    assert not pencil.frame.finite
    assert pencil.rows == 30
    assert pencil.gap == pytest.approx(16.0)
    assert len(pencil.angles) == 90
    assert np.all(np.diff(pencil.angles) > 0)


def test_rectified_decomposition_counts(rectified_patches):
    _, patch_set = rectified_patches

    assert len(patch_set) == 10620
    assert len(patch_set.row_groups()) == 90


def test_interior_pixels_are_covered_nine_times(rectified_patches):
    # 1. Arrange
    _, patch_set = rectified_patches

    # 2. Act
    counts = patch_set.coverage_counts()

    # 3. Assert
    interior = counts[32:-32, 32:-32]
    assert np.mean(interior == 9) >= 0.99
    assert counts.max() <= 9


def test_covering_patches_contain_the_pixel(rectified_patches):
    _, patch_set = rectified_patches

    covering = patch_set.patches_covering(320, 240)

    assert len(covering) == 9
    for index in covering:
        patch = patch_set.patches[index]
        assert patch.bounds[0] <= 240 < patch.bounds[1]
        assert patch.radial[0] <= 320 < patch.radial[1]


def test_epipole_inside_image_uses_a_full_circle(service):
    # 1. Arrange
    image = make_image("a", np.zeros((480, 640, 3), np.uint8))
    vector = np.array([319.5, 239.5, 1.0])
    e = Epipole(vector=vector / np.linalg.norm(vector))

    # 2. Act
    pencil = service.build_pencil(image, e)
    patch_set = service.decompose_reference(image, pencil)

    # 3. Assert
    assert pencil.frame.finite and pencil.full_circle
    assert pencil.exclusion_radius == pytest.approx(32.0)
    assert pencil.gap * pencil.rows == pytest.approx(2.0 * math.pi)
    counts = patch_set.coverage_counts()
    assert counts[240, 320] == 0

    ys, xs = np.mgrid[0:480, 0:640]
    ring = (np.hypot(xs - 319.5, ys - 239.5) >= 48) & (xs >= 32) & (xs < 608) & (ys >= 32) & (ys < 448)
    assert np.mean(counts[ring] == 9) >= 0.99


def test_candidate_count_follows_the_widths(service):
    # 1. Arrange
    image = noise_image("a", 128, 96)
    pg = rectified_geometry()
    patch_set = service.decompose_reference(image, service.build_pencil(image, pg.e_ref))
    r = next(p for p in patch_set.patches if p.family == 0 and p.row == 2)

    # 2. Act
    candidates = service.candidate_patches(r, pg, image)

    # 3. Assert: strip length 128 with strides of a third of 8, 16 and 32
    assert len(candidates) == 48 + 24 + 12
    assert candidates.scale == pytest.approx(1.0)
    assert candidates.width_classes.count("narrow") == 48
    assert candidates.width_classes.count("wide") == 12


def test_candidates_include_the_identical_patch(service):
    image = noise_image("a", 128, 96)
    pg = rectified_geometry()
    patch_set = service.decompose_reference(image, service.build_pencil(image, pg.e_ref))
    r = patch_set.patches[len(patch_set) // 2]

    candidates = service.candidate_patches(r, pg, image)

    offsets = np.abs(candidates.corners - r.corners[None]).max(axis=(1, 2))
    assert offsets.min() < 1e-6


def test_candidate_corners_lie_on_the_corresponding_lines(service, basic_render):
    # 1. Arrange
    image_set, _, fmatrices = basic_render
    reference, support = image_set.images[0], image_set.images[1]
    pg = GeometryService().geometry_from_matrix(reference.id, support.id, fmatrices[(reference.id, support.id)])
    patch_set = service.decompose_reference(reference, service.build_pencil(reference, pg.e_ref))
    r = min(patch_set.patches, key=lambda p: np.hypot(*(p.center - [160.0, 120.0])))

    # 2. Act
    candidates = service.candidate_patches(r, pg, support)

    # 3. Assert
    assert not candidates.is_empty
    lo_line = GeometryService.corresponding_line(pg, r.lines[0])
    hi_line = GeometryService.corresponding_line(pg, r.lines[1])
    corners = candidates.corners.reshape(-1, 2)
    distance = np.minimum(line_distance(lo_line, corners), line_distance(hi_line, corners))
    assert distance.max() < 0.5
    assert {p.width_class for p in candidates.patches} == {"narrow", "nominal", "wide"}


def test_strip_outside_the_support_gives_no_candidates(service):
    reference = noise_image("a", 128, 96)
    support = noise_image("b", 128, 64, seed=1)
    pg = rectified_geometry()
    patch_set = service.decompose_reference(reference, service.build_pencil(reference, pg.e_ref))
    r = next(p for p in patch_set.patches if p.family == 0 and p.row == 5)

    candidates = service.candidate_patches(r, pg, support)

    assert candidates.is_empty
    assert candidates.patches == []


def test_axis_aligned_warp_is_exact(service):
    # 1. Arrange
    image = noise_image("a", 120, 100)
    patch = EpipolarPatch(owner_id="a", bounds=(0.0, 1.0), radial=(0.0, 1.0),
                          corners=quad(10, 20, 16, 12), center=np.array([18.0, 26.0]))

    # 2. Act
    samples, valid = service.warp_patch(image, patch, out_w=16, out_h=12)

    # 3. Assert
    np.testing.assert_allclose(samples, image.as_float()[20:32, 10:26], atol=1e-6)
    assert valid.all()


def test_rotated_warp_of_a_smooth_image(service):
    # 1. Arrange: a smooth sinusoid sampled through a rotated square
    ys, xs = np.mgrid[0:160, 0:200].astype(np.float64)
    signal = lambda x, y: 127.5 + 100.0 * np.sin(x / 7.0) * np.cos(y / 9.0)
    pixels = signal(xs, ys).astype(np.float32)
    angle, half = 0.3, 20.0
    u = np.array([math.cos(angle), math.sin(angle)])
    v = np.array([-math.sin(angle), math.cos(angle)])
    center = np.array([100.0, 80.0])
    corners = np.array([center - half * u - half * v, center + half * u - half * v,
                        center + half * u + half * v, center - half * u + half * v])

    # 2. Act
    samples, valid = service.warp_patches(pixels, corners[None], 32, 32)

    # 3. Assert
    s = (np.arange(32) + 0.5) / 32
    S, T = np.meshgrid(s, s)
    points = center + (2 * S[..., None] - 1) * half * u + (2 * T[..., None] - 1) * half * v
    expected = signal(points[..., 0], points[..., 1])
    mse = np.mean((samples[0] - expected) ** 2)
    assert 10.0 * np.log10(255.0 ** 2 / mse) > 35.0
    assert valid.all()


def test_samples_outside_the_image_are_marked_invalid(service):
    pixels = np.ones((64, 64), np.float32)

    _, valid = service.warp_patches(pixels, quad(50, 10, 30, 10)[None], 30, 10)

    assert valid[0, :, :13].all()
    assert not valid[0, :, 15:].any()


def test_zero_area_patch_is_degenerate(service):
    image = noise_image("a", 64, 64)
    patch = EpipolarPatch(owner_id="a", bounds=(0.0, 1.0), radial=(0.0, 1.0),
                          corners=np.full((4, 2), 10.0), center=np.array([10.0, 10.0]))

    with pytest.raises(DegeneratePatchError):
        service.warp_patch(image, patch)


def test_clip_polygon_keeps_the_positive_side():
    square = image_extent(10, 10)

    clipped = clip_polygon(square, np.array([1.0, 0.0]), 4.5)

    assert polygon_area(clipped) == pytest.approx(5.0 * 10.0)


def test_true_candidate_is_oriented_like_the_reference(service, basic_scene, basic_render):
    # 1. Arrange: the background plane maps view 0 onto view 1 exactly
    image_set, masks, fmatrices = basic_render
    reference, support = image_set.images[0], image_set.images[1]
    pg = GeometryService().geometry_from_matrix(reference.id, support.id, fmatrices[(reference.id, support.id)])
    H = basic_scene.background_homography(1) @ np.linalg.inv(basic_scene.background_homography(0))
    patch_set = service.decompose_reference(reference, service.build_pencil(reference, pg.e_ref))
    descriptors = DescriptorService()
    size = service.run_config.canonical_size

    def on_background(mask, points):
        cols, rows = np.rint(points).astype(int).T
        inside = (cols >= 0) & (cols < mask.labels.shape[1]) & (rows >= 0) & (rows < mask.labels.shape[0])
        return inside.all() and not mask.dynamic[rows, cols].any()

    errors, cosines, found = [], [], []
    for r in patch_set.patches[::40]:
        mapped = cv2.perspectiveTransform(r.corners[None], H)[0]
        if not (on_background(masks[0], r.corners) and on_background(masks[1], mapped)):
            continue

        # 2. Act
        candidates = service.candidate_patches(r, pg, support)
        corner_error = np.linalg.norm(candidates.corners - mapped[None], axis=2).max(axis=1)
        true_index = int(np.argmin(corner_error))
        ref_samples, ref_valid = service.warp_patches(reference.as_float(), r.corners[None], size, size)
        cand_samples, cand_valid = service.warp_patches(support.as_float(), candidates.corners, size, size)
        similarity = descriptors.similarity_matrix(
            DescriptorKind.HOG,
            descriptors.describe(DescriptorKind.HOG, ref_samples, ref_valid),
            descriptors.describe(DescriptorKind.HOG, cand_samples, cand_valid),
        )[0]
        best_center = candidates.corners[int(np.argmax(similarity))].mean(axis=0)
        errors.append(corner_error[true_index])
        cosines.append(similarity[true_index])
        found.append(np.linalg.norm(best_center - mapped.mean(axis=0)) <= service.run_config.target_height)

    # 3. Assert: corner i of the best placed candidate sits on the image of reference corner i
    assert len(errors) >= 20
    assert np.mean(np.array(errors) < 8.0) >= 0.9
    assert np.median(cosines) >= 0.8
    assert np.mean(found) >= 0.5


@pytest.mark.parametrize("order", [[0, 1, 2, 3], [3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1]])
def test_orient_like_restores_the_reference_corner_order(order):
    # 1. Arrange: c0, c1 on the line y = 0, c2, c3 on y = 16
    reference = quad(10, 0, 16, 16)
    lo_line = np.array([0.0, 1.0, 0.5])
    shuffled = reference[order][None]

    # 2. Act
    oriented = PatchService.orient_like(shuffled, lo_line, reference)

    # 3. Assert
    np.testing.assert_allclose(oriented[0], reference)
