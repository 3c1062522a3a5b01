from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from src import config
from src.services.descriptor_service import DescriptorKind, DescriptorService
from src.services.geometry_service import PairGeometry, SupportGraph
from src.services.patch_service import CandidateSet, EpipolarPatch, PatchService, PatchSet
from src.logging_config import logger


@dataclass
class ConfidenceTable:
    """Raw patch confidences per (reference, support) pair and descriptor kind."""
    entries: dict = field(default_factory=dict)   # (ref, sup) -> {DescriptorKind: (N,) array}
    max_distance: float = 0.0

    def add(self, reference_id: str, support_id: str, confidences: dict, max_distance: float = 0.0):
        self.entries[(reference_id, support_id)] = confidences
        self.max_distance = max(self.max_distance, max_distance)

    def kinds(self) -> list:
        found = []
        for confidences in self.entries.values():
            for kind in confidences:
                if kind not in found:
                    found.append(kind)
        return found


@dataclass(frozen=True)
class NormalizationStats:
    ranges: dict   # DescriptorKind -> (min, max)

    def apply(self, kind, values: np.ndarray) -> np.ndarray:
        low, high = self.ranges[kind]
        if high <= low:
            return np.full(np.shape(values), config.NEUTRAL_PROBABILITY)
        return (np.asarray(values, dtype=np.float64) - low) / (high - low)

    def to_dict(self) -> dict:
        return {DescriptorKind(kind).value: {"min": round(lo, 9), "max": round(hi, 9)}
                for kind, (lo, hi) in self.ranges.items()}


@dataclass(frozen=True)
class MatchingProbabilityMap:
    reference_id: str
    support_id: str
    probability: np.ndarray   # (H, W) in [0, 1]; uncovered pixels hold 0.5
    covered: np.ndarray       # (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.probability.shape


class ProbabilityService:
    """
    Patch confidences against each support image, their run-wide
    normalization, and the per-pair matching probability maps.
    """

    def __init__(self, run_config: config.RunConfig | None = None,
                 patch_service: PatchService | None = None,
                 descriptor_service: DescriptorService | None = None):
        self.run_config = run_config or config.RunConfig()
        self.patch_service = patch_service or PatchService(self.run_config)
        self.descriptor_service = descriptor_service or DescriptorService(self.run_config)
        self.weights = {DescriptorKind(k): w for k, w in self.run_config.descriptor_weights.items()}

    def reference_patches(self, reference, pg: PairGeometry) -> PatchSet:
        pencil = self.patch_service.build_pencil(reference, pg.e_ref)
        return self.patch_service.decompose_reference(reference, pencil)

    def patch_confidence(self, reference, r: EpipolarPatch, candidates: CandidateSet,
                         support, kind: DescriptorKind) -> float:
        """Best similarity between `r` and any of its candidates; 0 for an empty set."""
        if candidates.is_empty:
            return 0.0
        size = self.run_config.canonical_size
        ref_samples, ref_valid = self.patch_service.warp_patches(reference.as_float(), r.corners[None], size, size)
        cand_samples, cand_valid = self.patch_service.warp_patches(support.as_float(), candidates.corners, size, size)
        ref_desc = self.descriptor_service.describe(kind, ref_samples, ref_valid)
        cand_desc = self.descriptor_service.describe(kind, cand_samples, cand_valid)
        return float(self.descriptor_service.best_similarity(kind, ref_desc, cand_desc)[0])

    def pair_confidences(self, reference, support, pg: PairGeometry,
                         patch_set: PatchSet | None = None) -> tuple[dict, float]:
        """
        Raw confidences of every reference patch for one support image.
        Candidate strips depend only on a patch's row, so each row is matched once.

        Returns:
            ({kind: (N,) array}, largest pixel-to-patch-centre distance)
        """
        patch_set = patch_set or self.reference_patches(reference, pg)
        size = self.run_config.canonical_size
        kinds = list(self.weights)
        ref_samples, ref_valid = self.patch_service.warp_patches(reference.as_float(), patch_set.corners, size, size)
        ref_desc = self.descriptor_service.describe_all(ref_samples, ref_valid)
        del ref_samples, ref_valid

        support_pixels = support.as_float()
        confidences = {kind: np.zeros(len(patch_set)) for kind in kinds}
        empty_rows = 0
        for indices in patch_set.row_groups():
            candidates = self.patch_service.candidate_patches(patch_set.patches[indices[0]], pg, support)
            if candidates.is_empty:
                empty_rows += 1
                continue
            cand_samples, cand_valid = self.patch_service.warp_patches(support_pixels, candidates.corners, size, size)
            for kind in kinds:
                cand_desc = self.descriptor_service.describe(kind, cand_samples, cand_valid)
                confidences[kind][indices] = self.descriptor_service.best_similarity(
                    kind, ref_desc[kind][indices], cand_desc
                )

        summary = ", ".join(f"{k.value} mean {v.mean():.3f}" for k, v in confidences.items() if v.size)
        logger.info(
            f"Confidences '{reference.id}' vs '{support.id}': {len(patch_set)} patches, "
            f"{empty_rows} row(s) out of view, {summary}"
        )
        return confidences, patch_set.max_distance

    @staticmethod
    def normalize_confidences(table: ConfidenceTable) -> tuple[ConfidenceTable, NormalizationStats]:
        """Affine min-max map per descriptor over every pair of the run."""
        ranges = {}
        for kind in table.kinds():
            values = [c[kind] for c in table.entries.values() if kind in c and c[kind].size]
            if values:
                joined = np.concatenate(values)
                ranges[kind] = (float(joined.min()), float(joined.max()))
            else:
                ranges[kind] = (0.0, 0.0)
        stats = NormalizationStats(ranges=ranges)
        normalized = ConfidenceTable(max_distance=table.max_distance)
        for key, confidences in table.entries.items():
            normalized.entries[key] = {kind: stats.apply(kind, values) for kind, values in confidences.items()}
        for kind, (low, high) in ranges.items():
            logger.info(f"Normalization range for {DescriptorKind(kind).value}: [{low:.4f}, {high:.4f}]")
        return normalized, stats

    def matching_probability_map(self, reference, support_id: str, normalized: dict,
                                 patch_set: PatchSet, sigma: float) -> MatchingProbabilityMap:
        """
        Per-pixel convex combination of normalized confidences of the covering
        patches, weighted by a Gaussian of the distance to each patch centre
        times the descriptor weight.
        """
        pixels = reference.width * reference.height
        if sigma > 0:
            spatial = np.exp(-(patch_set.distances ** 2) / (2.0 * sigma ** 2))
        else:
            spatial = np.ones(patch_set.distances.shape)

        numerator = np.zeros(pixels)
        denominator = np.zeros(pixels)
        for kind, weight in self.weights.items():
            values = normalized[kind][patch_set.patch_ids]
            numerator += weight * np.bincount(patch_set.pixel_ids, weights=spatial * values, minlength=pixels)
            denominator += weight * np.bincount(patch_set.pixel_ids, weights=spatial, minlength=pixels)

        covered = denominator > 0
        probability = np.full(pixels, config.NEUTRAL_PROBABILITY)
        probability[covered] = np.clip(numerator[covered] / denominator[covered], 0.0, 1.0)
        shape = (reference.height, reference.width)
        return MatchingProbabilityMap(
            reference_id=reference.id,
            support_id=support_id,
            probability=probability.reshape(shape),
            covered=covered.reshape(shape),
        )

    def compute_maps(self, image_set, graph: SupportGraph, threads: int = 1):
        """
        Runs the two phases for every accepted pair: raw confidences (then
        the run-wide normalization and sigma), and map assembly. Patch sets are
        rebuilt in the second phase instead of being held for the whole run.

        Returns:
            ({reference id: [MatchingProbabilityMap, ...] in support order}, NormalizationStats, sigma)
        """
        pairs = [(ref, sup) for ref in graph.ids for sup in graph.supports(ref)]

        def confidences_for(pair):
            ref, sup = pair
            return self.pair_confidences(image_set.get(ref), image_set.get(sup), graph.geometry(ref, sup))

        table = ConfidenceTable()
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for (ref, sup), (confidences, max_distance) in zip(pairs, pool.map(confidences_for, pairs)):
                table.add(ref, sup, confidences, max_distance)

        normalized, stats = self.normalize_confidences(table)
        sigma = table.max_distance / 3.0
        logger.info(f"Spatial weight sigma: {sigma:.4f}px (max patch distance {table.max_distance:.4f}px)")

        def map_for(pair):
            ref, sup = pair
            reference = image_set.get(ref)
            patch_set = self.reference_patches(reference, graph.geometry(ref, sup))
            return self.matching_probability_map(reference, sup, normalized.entries[pair], patch_set, sigma)

        maps: dict = {ref: [] for ref in graph.ids}
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for (ref, _), pmap in zip(pairs, pool.map(map_for, pairs)):
                maps[ref].append(pmap)
        return maps, stats, sigma
