from dataclasses import dataclass

import numpy as np

from src import config
from src.utils.exceptions import ContractViolation
from src.logging_config import logger


@dataclass(frozen=True)
class DynamicProbabilityMap:
    image_id: str
    dynamic: np.ndarray         # (H, W) P_dynamic in (0, 1)
    support_count: np.ndarray   # (H, W) number of pair maps covering each pixel

    @property
    def static(self) -> np.ndarray:
        return 1.0 - self.dynamic

    @property
    def shape(self) -> tuple[int, int]:
        return self.dynamic.shape


class FusionService:
    """
    Combines per-pair matching probabilities into one dynamic probability map.
    """

    @staticmethod
    def remap(p):
        """
        Maps [0, 1] onto [REMAP_LOW, REMAP_HIGH].

        Raises:
            ContractViolation: If any value lies outside [0, 1].
        """
        values = np.asarray(p, dtype=np.float64)
        if np.any(~np.isfinite(values)) or np.any(values < 0.0) or np.any(values > 1.0):
            raise ContractViolation("remap expects probabilities in [0, 1].")
        remapped = config.REMAP_LOW + (config.REMAP_HIGH - config.REMAP_LOW) * values
        return float(remapped) if np.ndim(p) == 0 else remapped

    @staticmethod
    def fuse(maps: list, image_id: str = "") -> DynamicProbabilityMap:
        """
        P_static = prod(p) / (prod(p) + prod(1 - p)) per pixel, computed from sums
        of logarithms. Accepts arrays or matching maps; matching maps contribute to
        the support count only where they are covered.

        Raises:
            ContractViolation: With no maps or maps of different shapes.
        """
        if not maps:
            raise ContractViolation("fuse needs at least one probability map.")
        layers, coverage = [], []
        for item in maps:
            values = getattr(item, "probability", item)
            values = np.asarray(values, dtype=np.float64)
            layers.append(values)
            covered = getattr(item, "covered", None)
            coverage.append(np.ones(values.shape, dtype=bool) if covered is None else np.asarray(covered))
        shape = layers[0].shape
        if any(layer.shape != shape for layer in layers):
            raise ContractViolation(
                f"Cannot fuse maps of different shapes: {sorted({layer.shape for layer in layers})}"
            )

        stack = np.stack(layers)
        with np.errstate(divide="ignore"):
            log_static = np.log(stack).sum(axis=0)
            log_moving = np.log1p(-stack).sum(axis=0)
        with np.errstate(over="ignore", invalid="ignore"):
            p_static = 1.0 / (1.0 + np.exp(log_moving - log_static))
        support_count = np.stack(coverage).sum(axis=0).astype(np.int32)
        return DynamicProbabilityMap(image_id=image_id, dynamic=1.0 - p_static, support_count=support_count)

    def combine(self, pair_maps: list, image_id: str) -> DynamicProbabilityMap:
        """Remaps each matching map, then fuses them; uncovered pixels stay neutral."""
        remapped = []
        for pmap in pair_maps:
            values = np.where(pmap.covered, self.remap(pmap.probability), config.NEUTRAL_PROBABILITY)
            remapped.append(type(pmap)(
                reference_id=pmap.reference_id,
                support_id=pmap.support_id,
                probability=values,
                covered=pmap.covered,
            ))
        fused = self.fuse(remapped, image_id=image_id)
        uncovered = float(np.mean(fused.support_count == 0))
        logger.info(
            f"Fused {len(pair_maps)} map(s) for '{image_id}': mean P_dynamic "
            f"{fused.dynamic.mean():.4f}, uncovered fraction {uncovered:.4f}"
        )
        return fused

    @staticmethod
    def threshold(dmap: DynamicProbabilityMap, t: float) -> np.ndarray:
        """
        Raises:
            ContractViolation: If t lies outside [0, 1].
        """
        if not 0.0 <= t <= 1.0:
            raise ContractViolation(f"Threshold must lie in [0, 1], got {t}.")
        return dmap.dynamic >= t
