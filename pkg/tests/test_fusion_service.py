import numpy as np
import pytest

from src.services.fusion_service import DynamicProbabilityMap, FusionService
from src.services.probability_service import MatchingProbabilityMap
from src.utils.exceptions import ContractViolation


@pytest.fixture
def service():
    return FusionService()


@pytest.mark.parametrize("p, expected", [(0.0, 0.3), (0.5, 0.5), (1.0, 0.7)])
def test_remap_endpoints(service, p, expected):
    assert service.remap(p) == pytest.approx(expected)


@pytest.mark.parametrize("p", [-0.1, 1.2, float("nan")])
def test_remap_rejects_values_outside_unit_interval(service, p):
    with pytest.raises(ContractViolation):
        service.remap(p)


def test_remap_works_on_arrays(service):
    np.testing.assert_allclose(service.remap(np.array([0.0, 0.25, 1.0])), [0.3, 0.4, 0.7])


def test_neutral_maps_fuse_to_neutral(service):
    fused = service.fuse([np.full((2, 3), 0.5)] * 4)

    np.testing.assert_allclose(fused.dynamic, 0.5)
    assert np.all(fused.support_count == 4)


def test_opposite_evidence_cancels(service):
    fused = service.fuse([np.full((1, 1), 0.7), np.full((1, 1), 0.3)])

    assert fused.dynamic[0, 0] == pytest.approx(0.5)


def test_agreeing_evidence_is_amplified(service):
    # 1. Arrange
    maps = [np.full((1, 1), 0.7), np.full((1, 1), 0.7)]

    # 2. Act
    fused = service.fuse(maps)

    # 3. Assert: P_static = 0.49 / (0.49 + 0.09)
    assert 1.0 - fused.dynamic[0, 0] == pytest.approx(0.8448, abs=1e-4)


def test_more_static_evidence_lowers_the_dynamic_probability(service):
    one = service.fuse([np.full((1, 1), 0.6)])
    three = service.fuse([np.full((1, 1), 0.6)] * 3)

    assert three.dynamic[0, 0] < one.dynamic[0, 0]


def test_fusion_is_order_independent(service):
    rng = np.random.default_rng(0)
    maps = [rng.uniform(0.3, 0.7, (8, 8)) for _ in range(5)]

    forward = service.fuse(maps)
    backward = service.fuse(maps[::-1])

    np.testing.assert_allclose(forward.dynamic, backward.dynamic, atol=1e-12)


def test_shape_mismatch_is_rejected(service):
    with pytest.raises(ContractViolation, match="different shapes"):
        service.fuse([np.zeros((2, 2)) + 0.5, np.zeros((2, 3)) + 0.5])


def test_fuse_needs_a_map(service):
    with pytest.raises(ContractViolation):
        service.fuse([])


def test_combine_counts_covered_maps_only(service):
    # 1. Arrange: the second map covers only the left column
    covered = np.array([[True, False], [True, False]])
    maps = [
        MatchingProbabilityMap("a", "b", np.full((2, 2), 1.0), np.ones((2, 2), bool)),
        MatchingProbabilityMap("a", "c", np.full((2, 2), 0.5), covered),
    ]

    # 2. Act
    fused = service.combine(maps, "a")

    # 3. Assert
    np.testing.assert_array_equal(fused.support_count, [[2, 1], [2, 1]])
    np.testing.assert_allclose(fused.dynamic, 0.3)
    assert fused.image_id == "a"


@pytest.mark.parametrize("t, expected", [(0.0, [True, True, True]), (0.5, [False, True, True]), (1.0, [False, False, True])])
def test_threshold_is_inclusive(service, t, expected):
    dmap = DynamicProbabilityMap("a", np.array([[0.2, 0.5, 1.0]]), np.ones((1, 3), int))

    np.testing.assert_array_equal(service.threshold(dmap, t)[0], expected)


def test_threshold_outside_unit_interval_is_rejected(service):
    dmap = DynamicProbabilityMap("a", np.zeros((1, 1)), np.ones((1, 1), int))

    with pytest.raises(ContractViolation):
        service.threshold(dmap, 1.01)


def random_maps(seed, count, low=0.3, high=0.7, shape=(6, 6)):
    rng = np.random.default_rng(seed)
    return [rng.uniform(low, high, shape) for _ in range(count)]


@pytest.mark.parametrize("seed, count", [(0, 1), (1, 3), (2, 6)])
def test_neutral_map_changes_nothing(service, seed, count):
    maps = random_maps(seed, count)

    with_neutral = service.fuse(maps + [np.full((6, 6), 0.5)])

    np.testing.assert_allclose(with_neutral.dynamic, service.fuse(maps).dynamic, atol=1e-12)


@pytest.mark.parametrize("seed, count", [(0, 2), (1, 3), (2, 5)])
def test_agreeing_static_maps_are_amplified(service, seed, count):
    # 1. Arrange: every map says static
    maps = random_maps(seed, count, low=0.51, high=0.7)

    # 2. Act
    fused = service.fuse(maps)

    # 3. Assert
    assert np.all(fused.static > np.max(maps, axis=0))


@pytest.mark.parametrize("seed, count", [(0, 2), (1, 3), (2, 5)])
def test_agreeing_dynamic_maps_are_amplified(service, seed, count):
    maps = random_maps(seed, count, low=0.3, high=0.49)

    fused = service.fuse(maps)

    assert np.all(fused.static < np.min(maps, axis=0))


@pytest.mark.parametrize("seed, index", [(0, 0), (1, 2), (2, 4)])
def test_static_probability_grows_with_each_input(service, seed, index):
    # 1. Arrange
    maps = random_maps(seed, 5)
    raised = [m.copy() for m in maps]
    raised[index] = np.minimum(raised[index] + 0.05, 0.7)

    # 2. Act
    before = service.fuse(maps)
    after = service.fuse(raised)

    # 3. Assert
    assert np.all(after.static >= before.static)
    assert np.all(after.static[raised[index] > maps[index]] > before.static[raised[index] > maps[index]])
