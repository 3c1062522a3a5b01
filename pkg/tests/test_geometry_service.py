import json

import numpy as np
import pytest

from src import config
from src.services.geometry_service import (
    REFERENCE,
    SUPPORT,
    FundamentalMatrix,
    GeometryService,
    sampson_distance,
)
from src.services.imageset_service import ImageSet
from src.services.synthetic_service import SyntheticService
from src.utils.exceptions import (
    ContractViolation,
    DegenerateLineError,
    InvalidPencilMemberError,
    NoConsensusError,
    TooFewMatchesError,
)
from tests.conftest import noise_image, rectified_geometry


@pytest.fixture
def service():
    return GeometryService()


def point_line_distance(line, point):
    return abs(line[0] * point[0] + line[1] * point[1] + line[2]) / np.hypot(line[0], line[1])


def test_rectified_epipolar_line_is_the_same_row(service):
    pg = rectified_geometry()

    line = service.epipolar_line(pg.F, (123.0, 45.0))

    assert abs(line[0]) < 1e-12
    # Unit normal; y = 45 on the support side
    assert point_line_distance(line, (0.0, 45.0)) < 1e-9
    assert point_line_distance(line, (600.0, 45.0)) < 1e-9
    np.testing.assert_allclose(pg.e_ref.vector, [1.0, 0.0, 0.0], atol=1e-12)
    assert pg.e_ref.at_infinity and pg.e_ref.euclidean() is None


def test_epipolar_line_of_the_epipole_is_degenerate(service, basic_scene):
    F = basic_scene.fundamental(0, 1)
    e = service.epipole_of(F, REFERENCE)

    with pytest.raises(DegenerateLineError):
        service.epipolar_line(F, e.vector)


def test_epipolar_line_rejects_non_finite_points(service):
    with pytest.raises(ContractViolation):
        service.epipolar_line(rectified_geometry().F, (np.nan, 1.0))


def test_fundamental_matrix_is_normalized_rank_two():
    F = FundamentalMatrix.from_array(np.arange(1.0, 10.0).reshape(3, 3) + np.eye(3))

    assert np.linalg.norm(F.matrix) == pytest.approx(1.0)
    assert abs(np.linalg.det(F.matrix)) < 1e-12
    assert not F.matrix.flags.writeable


def test_epipoles_are_null_vectors(service, basic_scene):
    F = basic_scene.fundamental(1, 3)

    e_ref = service.epipole_of(F, REFERENCE)
    e_sup = service.epipole_of(F, SUPPORT)

    assert np.linalg.norm(F.matrix @ e_ref.vector) < 1e-9
    assert np.linalg.norm(F.matrix.T @ e_sup.vector) < 1e-9
    assert np.linalg.norm(e_ref.vector) == pytest.approx(1.0)


def test_reference_epipole_is_the_projected_support_centre(service, basic_scene):
    F = basic_scene.fundamental(0, 2)

    e_ref = service.epipole_of(F, REFERENCE).euclidean()

    expected = basic_scene.cameras[0].project(basic_scene.cameras[2].C)[0]
    np.testing.assert_allclose(e_ref, expected, atol=0.5)


def test_corresponding_line_is_independent_of_the_sample_point(service, basic_scene):
    # 1. Arrange
    pg = service.geometry_from_matrix("a", "b", basic_scene.fundamental(0, 1))
    line = np.cross(pg.e_ref.vector, [100.0, 80.0, 1.0])

    # 2. Act
    first = service.corresponding_line(pg, line)
    second = service.corresponding_line(pg, line, offset=57.0)

    # 3. Assert: same line up to sign
    if first @ second < 0:
        second = -second
    np.testing.assert_allclose(first, second, atol=1e-8)
    assert abs(first @ pg.e_sup.vector) < 1e-9


def test_corresponding_line_carries_static_matches(service, basic_scene):
    # 1. Arrange
    pg = service.geometry_from_matrix("a", "b", basic_scene.fundamental(0, 1))
    matches, _ = SyntheticService.correspondences(basic_scene, 0, 1, count=20, seed=3)

    for m in matches:
        # 2. Act
        line = service.corresponding_line(pg, np.cross(pg.e_ref.vector, [*m.x_ref, 1.0]))
        # 3. Assert
        assert point_line_distance(line, m.x_sup) < 0.5


def test_corresponding_line_rejects_lines_missing_the_epipole(service):
    pg = rectified_geometry()

    with pytest.raises(InvalidPencilMemberError):
        service.corresponding_line(pg, [1.0, 0.0, -10.0])


def test_ransac_on_clean_matches(service, basic_scene):
    # 1. Arrange
    matches, _ = SyntheticService.correspondences(basic_scene, 0, 1, count=200, seed=1)

    # 2. Act
    pg = service.estimate_fundamental_ransac(matches, seed=0, pair=("a", "b"))

    # 3. Assert
    assert len(pg.inliers) == 200
    assert pg.mean_sampson_error < 0.1
    assert np.linalg.norm(pg.F.matrix) == pytest.approx(1.0)
    assert abs(np.linalg.det(pg.F.matrix)) < 1e-10


def test_ransac_rejects_outliers(service, basic_scene):
    # 1. Arrange
    matches, inliers = SyntheticService.correspondences(basic_scene, 0, 2, count=400, outlier_ratio=0.3, seed=2)

    # 2. Act
    pg = service.estimate_fundamental_ransac(matches, seed=0, pair=("a", "b"))

    # 3. Assert
    kept = {(m.x_ref, m.x_sup) for m in pg.inliers}
    accepted_outliers = sum(1 for m, ok in zip(matches, inliers) if not ok and (m.x_ref, m.x_sup) in kept)
    assert accepted_outliers <= 0.05 * np.count_nonzero(~inliers)
    assert pg.mean_sampson_error < 0.5

    x_ref = np.array([m.x_ref for m, ok in zip(matches, inliers) if ok])
    x_sup = np.array([m.x_sup for m, ok in zip(matches, inliers) if ok])
    assert np.median(sampson_distance(pg.F.matrix, x_ref, x_sup)) < 1.0


def test_ransac_is_deterministic_per_seed(service, basic_scene):
    matches, _ = SyntheticService.correspondences(basic_scene, 1, 2, count=120, outlier_ratio=0.2, seed=5)

    first = service.estimate_fundamental_ransac(matches, seed=11, pair=("a", "b"))
    second = service.estimate_fundamental_ransac(matches, seed=11, pair=("a", "b"))

    np.testing.assert_array_equal(first.F.matrix, second.F.matrix)


def test_ransac_needs_eight_matches(service, basic_scene):
    matches, _ = SyntheticService.correspondences(basic_scene, 0, 1, count=7, seed=1)

    with pytest.raises(TooFewMatchesError):
        service.estimate_fundamental_ransac(matches, seed=0)


def test_ransac_without_consensus(service, basic_scene):
    # Every support point replaced by a random location
    matches, _ = SyntheticService.correspondences(basic_scene, 0, 1, count=200, outlier_ratio=1.0, seed=4)

    with pytest.raises(NoConsensusError):
        service.estimate_fundamental_ransac(matches, seed=0)


def test_support_graph_from_supplied_matrices(service, basic_render):
    # 1. Arrange
    image_set, _, fmatrices = basic_render
    run_config = config.RunConfig(estimate_fundamental=False)

    # 2. Act
    graph = GeometryService(run_config).build_support_graph(image_set, seed=0, fmatrices=fmatrices, threads=2)

    # 3. Assert
    assert graph.edge_count == 20
    assert graph.average_support_size() == 4.0
    assert graph.supports("view_00") == ["view_01", "view_02", "view_03", "view_04"]
    assert graph.geometry("view_01", "view_03").source == "file"
    assert graph.limited(2).degree("view_02") == 2


def test_support_graph_records_failed_pairs(mocker):
    # 1. Arrange: 'c' shares no matches with anybody
    images = [noise_image(name, 96, 72, seed=i) for i, name in enumerate("abc")]
    scene = SyntheticService().build_scene("basic", seed=1, width=96, height=72)
    good, _ = SyntheticService.correspondences(scene, 0, 1, count=100, seed=1)
    service = GeometryService()
    mocker.patch.object(service.feature_service, "extract", side_effect=lambda image: image.id)
    mocker.patch.object(
        service.feature_service, "match",
        side_effect=lambda a, b: good if (a, b) == ("a", "b") else [],
    )

    # 2. Act
    graph = service.build_support_graph(ImageSet(name="s", images=tuple(images)), seed=0)

    # 3. Assert
    assert graph.supports("a") == ["b"]
    assert graph.supports("b") == ["a"]
    assert graph.degree("c") == 0
    assert ("c", "a") in graph.failures and ("a", "c") in graph.failures
    assert graph.to_dict()["set_size"] == 3


def test_reversed_geometry_swaps_roles(service, basic_scene):
    pg = service.geometry_from_matrix("a", "b", basic_scene.fundamental(0, 1))

    back = pg.reversed()

    assert (back.reference_id, back.support_id) == ("b", "a")
    np.testing.assert_allclose(back.e_ref.vector, pg.e_sup.vector)
    np.testing.assert_allclose(back.F.matrix, basic_scene.fundamental(1, 0).matrix, atol=1e-9)


def test_load_fmatrices(tmp_path, basic_scene):
    # 1. Arrange
    path = tmp_path / "fmatrices.json"
    path.write_text(json.dumps({"x|y": basic_scene.fundamental(0, 1).to_list()}))

    # 2. Act
    matrices = GeometryService.load_fmatrices(str(path))

    # 3. Assert
    np.testing.assert_allclose(matrices[("x", "y")].matrix, basic_scene.fundamental(0, 1).matrix, atol=1e-12)


def test_load_fmatrices_rejects_malformed_entries(tmp_path):
    path = tmp_path / "fmatrices.json"
    path.write_text(json.dumps({"xy": [1, 2, 3]}))

    with pytest.raises(Exception, match="Malformed"):
        GeometryService.load_fmatrices(str(path))
