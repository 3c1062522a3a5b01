import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from src import config
from src.services.feature_service import Correspondence, FeatureService, stack_points
from src.utils.exceptions import (
    ContractViolation,
    DegenerateLineError,
    GeometryError,
    InvalidPencilMemberError,
    NoConsensusError,
    TooFewMatchesError,
    ValidationError,
)
from src.logging_config import logger

REFERENCE = "reference"
SUPPORT = "support"


@dataclass(frozen=True)
class FundamentalMatrix:
    """Rank-2, unit Frobenius norm 3x3 matrix with x_sup^T F x_ref = 0."""
    matrix: np.ndarray

    @classmethod
    def from_array(cls, values) -> "FundamentalMatrix":
        m = np.asarray(values, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)) or np.linalg.norm(m) == 0:
            raise ContractViolation("A fundamental matrix must be finite and non-zero.")
        u, s, vt = np.linalg.svd(m)
        s[2] = 0.0
        m = u @ np.diag(s) @ vt
        m /= np.linalg.norm(m)
        # Fix the overall sign so equal geometries compare equal
        if m.flat[np.argmax(np.abs(m))] < 0:
            m = -m
        m.setflags(write=False)
        return cls(matrix=m)

    @property
    def T(self) -> "FundamentalMatrix":
        return FundamentalMatrix.from_array(self.matrix.T)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix.reshape(-1)]


@dataclass(frozen=True)
class Epipole:
    """Homogeneous image point, unit 3-vector; third coordinate 0 at infinity."""
    vector: np.ndarray

    @property
    def at_infinity(self) -> bool:
        return abs(self.vector[2]) < 1e-12

    def euclidean(self) -> np.ndarray | None:
        if self.at_infinity:
            return None
        return self.vector[:2] / self.vector[2]


@dataclass(frozen=True)
class PairGeometry:
    reference_id: str
    support_id: str
    F: FundamentalMatrix
    e_ref: Epipole
    e_sup: Epipole
    inliers: list = field(default_factory=list)
    inlier_ratio: float = 1.0
    mean_sampson_error: float = 0.0
    source: str = "ransac"

    def reversed(self) -> "PairGeometry":
        return PairGeometry(
            reference_id=self.support_id,
            support_id=self.reference_id,
            F=self.F.T,
            e_ref=self.e_sup,
            e_sup=self.e_ref,
            inliers=[Correspondence(x_ref=m.x_sup, x_sup=m.x_ref, score=m.score) for m in self.inliers],
            inlier_ratio=self.inlier_ratio,
            mean_sampson_error=self.mean_sampson_error,
            source=self.source,
        )


@dataclass
class SupportGraph:
    """For each image id, the ids of support images with accepted geometry."""
    ids: list[str]
    geometries: dict = field(default_factory=dict)   # (ref, sup) -> PairGeometry
    failures: dict = field(default_factory=dict)     # (ref, sup) -> reason

    def supports(self, image_id: str) -> list[str]:
        return [sup for sup in self.ids if (image_id, sup) in self.geometries]

    def degree(self, image_id: str) -> int:
        return len(self.supports(image_id))

    @property
    def edge_count(self) -> int:
        return len(self.geometries)

    def average_support_size(self) -> float:
        if not self.ids:
            return 0.0
        return sum(self.degree(i) for i in self.ids) / len(self.ids)

    def geometry(self, reference_id: str, support_id: str) -> PairGeometry:
        return self.geometries[(reference_id, support_id)]

    def limited(self, max_support: int) -> "SupportGraph":
        """Keeps per reference the `max_support` supports with the most inliers."""
        if max_support <= 0:
            return self
        kept = {}
        for ref in self.ids:
            ranked = sorted(
                self.supports(ref),
                key=lambda sup: (-len(self.geometries[(ref, sup)].inliers), sup),
            )
            for sup in ranked[:max_support]:
                kept[(ref, sup)] = self.geometries[(ref, sup)]
        return SupportGraph(ids=list(self.ids), geometries=kept, failures=dict(self.failures))

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": i, "supports": self.supports(i)} for i in self.ids],
            "edges": [
                {
                    "reference": ref,
                    "support": sup,
                    "source": pg.source,
                    "inliers": len(pg.inliers),
                    "inlier_ratio": round(pg.inlier_ratio, 6),
                    "mean_sampson_error": round(pg.mean_sampson_error, 6),
                    "F": [round(v, 12) for v in pg.F.to_list()],
                }
                for (ref, sup), pg in sorted(self.geometries.items())
            ],
            "failures": [
                {"reference": ref, "support": sup, "reason": reason}
                for (ref, sup), reason in sorted(self.failures.items())
            ],
            "set_size": len(self.ids),
            "average_support_size": round(self.average_support_size(), 6),
        }


def sampson_distance(F: np.ndarray, x_ref: np.ndarray, x_sup: np.ndarray) -> np.ndarray:
    """First-order geometric error of each correspondence, in pixels."""
    n = len(x_ref)
    xr = np.column_stack([x_ref, np.ones(n)])
    xs = np.column_stack([x_sup, np.ones(n)])
    fx = xr @ F.T          # rows: F x
    ftx = xs @ F           # rows: F^T x'
    num = np.sum(xs * fx, axis=1) ** 2
    den = fx[:, 0] ** 2 + fx[:, 1] ** 2 + ftx[:, 0] ** 2 + ftx[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(den > 0, num / den, np.inf)
    return np.sqrt(err)


def normalize_points(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translates to the centroid and scales the mean distance to sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = math.sqrt(2.0) / (mean_dist + 1e-12)
    T = np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    homogeneous = np.column_stack([points, np.ones(len(points))]) @ T.T
    return homogeneous, T


def eight_point(x_ref: np.ndarray, x_sup: np.ndarray) -> np.ndarray:
    """Normalized eight-point estimate of F (rank 2, unit norm) from >= 8 matches."""
    p1, T1 = normalize_points(x_ref)
    p2, T2 = normalize_points(x_sup)
    A = np.column_stack([
        p2[:, 0] * p1[:, 0], p2[:, 0] * p1[:, 1], p2[:, 0],
        p2[:, 1] * p1[:, 0], p2[:, 1] * p1[:, 1], p2[:, 1],
        p1[:, 0], p1[:, 1], np.ones(len(p1)),
    ])
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)

    # Enforce rank 2 before denormalizing
    u, s, vt = np.linalg.svd(F)
    s[2] = 0.0
    F = T2.T @ (u @ np.diag(s) @ vt) @ T1
    return F / np.linalg.norm(F)


def pair_rng(seed: int, id_a: str, id_b: str) -> np.random.Generator:
    """Private generator per pair so worker scheduling cannot change results."""
    entropy = [int(seed), zlib.crc32(id_a.encode("utf-8")), zlib.crc32(id_b.encode("utf-8"))]
    return np.random.default_rng(np.random.SeedSequence(entropy))


class GeometryService:
    """
    Robust pairwise epipolar geometry and the support graph of an image set.
    """

    def __init__(self, run_config: config.RunConfig | None = None):
        self.run_config = run_config or config.RunConfig()
        rc = self.run_config
        self.feature_service = FeatureService(
            max_corners=rc.harris_max_corners, window=rc.ncc_window, ratio=rc.ncc_ratio
        )

    def detect_and_match(self, a, b) -> list[Correspondence]:
        return self.feature_service.detect_and_match(a, b)

    def estimate_fundamental_ransac(self, matches: list[Correspondence], seed: int,
                                    pair: tuple[str, str] = ("", "")) -> PairGeometry:
        """
        Normalized eight-point inside RANSAC with a Sampson-distance inlier test.

        Raises:
            TooFewMatchesError: With fewer than 8 matches.
            NoConsensusError: When the acceptance rule (inlier count and ratio) fails.
        """
        rc = self.run_config
        if len(matches) < 8:
            raise TooFewMatchesError(f"Need at least 8 correspondences, got {len(matches)}.")

        x_ref, x_sup = stack_points(matches)
        n = len(matches)
        rng = pair_rng(seed, *pair)
        threshold = rc.ransac_threshold

        best_mask = None
        best_sample_model = None
        best_count = 0
        best_error = np.inf
        needed = rc.ransac_max_iterations
        iteration = 0
        while iteration < min(needed, rc.ransac_max_iterations):
            iteration += 1
            sample = rng.choice(n, size=8, replace=False)
            F = eight_point(x_ref[sample], x_sup[sample])
            errors = sampson_distance(F, x_ref, x_sup)
            mask = errors <= threshold
            count = int(mask.sum())
            error = float(errors[mask].sum()) if count else np.inf
            if count > best_count or (count == best_count and count > 0 and error < best_error):
                best_mask, best_count, best_error = mask, count, error
                best_sample_model = F
                # Adaptive number of iterations for the current inlier ratio
                w = count / n
                if w >= 1.0:
                    needed = iteration
                elif w > 0:
                    denom = math.log(1.0 - w ** 8)
                    if denom < 0:
                        needed = int(math.ceil(math.log(1.0 - rc.ransac_confidence) / denom))

        if best_mask is None or best_count < 8:
            raise NoConsensusError(f"RANSAC found no consensus set ({best_count} inliers of {n}).")

        # Re-estimate on the consensus set; keep the sample model if refinement collapses
        fm = FundamentalMatrix.from_array(eight_point(x_ref[best_mask], x_sup[best_mask]))
        errors = sampson_distance(fm.matrix, x_ref, x_sup)
        mask = errors <= threshold
        if mask.sum() < 8:
            fm = FundamentalMatrix.from_array(best_sample_model)
            errors = sampson_distance(fm.matrix, x_ref, x_sup)
            mask = errors <= threshold

        count = int(mask.sum())
        ratio = count / n
        if count < rc.min_inliers or ratio < rc.min_inlier_ratio:
            raise NoConsensusError(
                f"Acceptance rule failed: {count} inliers (min {rc.min_inliers}), "
                f"ratio {ratio:.3f} (min {rc.min_inlier_ratio})."
            )

        inliers = [m for m, keep in zip(matches, mask) if keep]
        mean_error = float(errors[mask].mean()) if count else 0.0
        logger.info(
            f"RANSAC {pair[0]}->{pair[1]}: {count}/{n} inliers, "
            f"ratio {ratio:.3f}, mean Sampson {mean_error:.3f}px, {iteration} iterations"
        )
        return PairGeometry(
            reference_id=pair[0],
            support_id=pair[1],
            F=fm,
            e_ref=self.epipole_of(fm, REFERENCE),
            e_sup=self.epipole_of(fm, SUPPORT),
            inliers=inliers,
            inlier_ratio=ratio,
            mean_sampson_error=mean_error,
        )

    @staticmethod
    def epipolar_line(F: FundamentalMatrix, x) -> np.ndarray:
        """
        Line F·x in the support image, scaled so its normal has unit length.

        Raises:
            ContractViolation: If x is not finite.
            DegenerateLineError: If x is the reference epipole.
        """
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ContractViolation("epipolar_line needs a finite point.")
        xh = x if x.shape == (3,) else np.array([x[0], x[1], 1.0])
        line = F.matrix @ xh
        norm = math.hypot(line[0], line[1])
        if norm <= 1e-12 * max(1.0, float(np.linalg.norm(xh))):
            raise DegenerateLineError("The point is the reference epipole; its epipolar line is undefined.")
        return line / norm

    @staticmethod
    def epipole_of(F: FundamentalMatrix, side: str) -> Epipole:
        """Right null vector (reference) or left null vector (support) of F."""
        if side not in (REFERENCE, SUPPORT):
            raise ContractViolation(f"Unknown side '{side}'.")
        u, _, vt = np.linalg.svd(F.matrix)
        e = vt[-1] if side == REFERENCE else u[:, -1]
        e = e / np.linalg.norm(e)
        if abs(e[2]) > 1e-12:
            if e[2] < 0:
                e = -e
        else:
            first = e[np.flatnonzero(np.abs(e) > 1e-12)[0]]
            if first < 0:
                e = -e
        e = e.copy()
        e.setflags(write=False)
        return Epipole(vector=e)

    @staticmethod
    def corresponding_line(pg: PairGeometry, line_ref, offset: float = 0.0) -> np.ndarray:
        """
        Maps a reference epipolar line to its partner through e_sup.

        Any finite point of the line other than the epipole gives the same result;
        `offset` moves the sample point along the line.

        Raises:
            InvalidPencilMemberError: If the line misses the reference epipole.
        """
        line = np.asarray(line_ref, dtype=np.float64)
        norm_ab = math.hypot(line[0], line[1])
        if norm_ab < 1e-12:
            raise InvalidPencilMemberError("The line at infinity is not a member of the pencil.")
        line = line / norm_ab
        e = pg.e_ref.vector
        residual = abs(float(line @ e)) / float(np.linalg.norm(line))
        if residual > 1e-6:
            raise InvalidPencilMemberError(
                f"Line does not pass through the reference epipole (residual {residual:.2e})."
            )

        a, b, c = line
        direction = np.array([-b, a])
        point = np.array([-a * c, -b * c]) + offset * direction
        e_xy = pg.e_ref.euclidean()
        if e_xy is not None and np.linalg.norm(point - e_xy) < 1e-3:
            point = point + 100.0 * direction
        return GeometryService.epipolar_line(pg.F, point)

    @staticmethod
    def load_fmatrices(path: str) -> dict:
        """Reads {"idA|idB": [9 floats]} with x_B^T F x_A = 0."""
        try:
            with open(path, "r", encoding="utf-8") as handle:
                raw = json.load(handle)
        except (OSError, json.JSONDecodeError) as e:
            raise ValidationError(f"Could not read fundamental matrices from {path}: {e}")
        matrices = {}
        for key, values in raw.items():
            if "|" not in key or len(values) != 9:
                raise ValidationError(f"Malformed fundamental matrix entry '{key}' in {path}.")
            id_a, id_b = key.split("|", 1)
            matrices[(id_a, id_b)] = FundamentalMatrix.from_array(values)
        logger.info(f"Loaded {len(matrices)} fundamental matrices from {path}")
        return matrices

    def geometry_from_matrix(self, reference_id: str, support_id: str, F: FundamentalMatrix) -> PairGeometry:
        return PairGeometry(
            reference_id=reference_id,
            support_id=support_id,
            F=F,
            e_ref=self.epipole_of(F, REFERENCE),
            e_sup=self.epipole_of(F, SUPPORT),
            source="file",
        )

    def build_support_graph(self, image_set, seed: int, fmatrices: dict | None = None,
                            threads: int = 1) -> SupportGraph:
        """
        Estimates every unordered pair once and stores both directions.
        Pairs found in `fmatrices` skip estimation and count as accepted.
        """
        fmatrices = fmatrices or {}
        images = list(image_set)
        graph = SupportGraph(ids=[image.id for image in images])
        pairs = [(a, b) for i, a in enumerate(images) for b in images[i + 1:]]

        features = {}
        if self.run_config.estimate_fundamental:
            pending = [
                image for image in images
                if any(
                    image.id in (a.id, b.id)
                    and (a.id, b.id) not in fmatrices and (b.id, a.id) not in fmatrices
                    for a, b in pairs
                )
            ]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for image, extracted in zip(pending, pool.map(self.feature_service.extract, pending)):
                    features[image.id] = extracted

        def solve(pair):
            a, b = pair
            if (a.id, b.id) in fmatrices:
                return self.geometry_from_matrix(a.id, b.id, fmatrices[(a.id, b.id)]), None
            if (b.id, a.id) in fmatrices:
                return self.geometry_from_matrix(b.id, a.id, fmatrices[(b.id, a.id)]).reversed(), None
            if not self.run_config.estimate_fundamental:
                return None, "no fundamental matrix supplied and estimation is disabled"
            try:
                matches = self.feature_service.match(features[a.id], features[b.id])
                logger.info(f"Putative matches '{a.id}' -> '{b.id}': {len(matches)}")
                return self.estimate_fundamental_ransac(matches, seed, (a.id, b.id)), None
            except GeometryError as e:
                return None, str(e)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve, pairs))

        for (a, b), (pg, reason) in zip(pairs, results):
            if pg is None:
                logger.warning(f"Pair '{a.id}'/'{b.id}' excluded from support graph: {reason}")
                graph.failures[(a.id, b.id)] = reason
                graph.failures[(b.id, a.id)] = reason
                continue
            if (b.id, a.id) in fmatrices:
                graph.geometries[(b.id, a.id)] = self.geometry_from_matrix(b.id, a.id, fmatrices[(b.id, a.id)])
            else:
                graph.geometries[(b.id, a.id)] = pg.reversed()
            graph.geometries[(a.id, b.id)] = pg

        for image_id in graph.ids:
            degree = graph.degree(image_id)
            if degree == 0:
                logger.warning(f"Image '{image_id}' has an empty support set.")
            else:
                logger.info(f"Image '{image_id}' support set: {graph.supports(image_id)}")
        return graph
