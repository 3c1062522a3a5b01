from dataclasses import dataclass, field

import numpy as np

from src import config
from src.utils.exceptions import ContractViolation
from src.logging_config import logger


def threshold_grid(step: float = config.THRESHOLD_STEP) -> np.ndarray:
    """0, step, ..., 1 computed as i / n so grid values are exact decimals."""
    n = int(round(1.0 / step))
    return np.arange(n + 1) / n


@dataclass
class ImageScore:
    image_id: str
    best_threshold: float
    best_jaccard: float
    set_jaccard: float = 0.0
    fixed_jaccard: float = 0.0
    uncovered_fraction: float = 0.0
    width: int = 0
    height: int = 0


@dataclass
class EvalReport:
    images: list = field(default_factory=list)       # ImageScore per image with ground truth
    set_threshold: float = 0.0
    per_image_mean: float = 0.0
    per_image_std: float = 0.0
    per_set_mean: float = 0.0
    per_set_std: float = 0.0
    fixed_threshold: float = config.THRESHOLD
    fixed_mean: float = 0.0
    fixed_std: float = 0.0

    def threshold_for(self, image_id: str, protocol: str) -> float:
        if protocol == "per_image":
            for score in self.images:
                if score.image_id == image_id:
                    return score.best_threshold
        if protocol == "per_set" and self.images:
            return self.set_threshold
        return self.fixed_threshold

    def to_dict(self) -> dict:
        r = lambda v: round(float(v), 6)
        return {
            "per_image": {
                "mean": r(self.per_image_mean),
                "std": r(self.per_image_std),
                "images": {
                    s.image_id: {"threshold": r(s.best_threshold), "jaccard": r(s.best_jaccard)}
                    for s in self.images
                },
            },
            "per_set": {
                "threshold": r(self.set_threshold),
                "mean": r(self.per_set_mean),
                "std": r(self.per_set_std),
                "images": {s.image_id: r(s.set_jaccard) for s in self.images},
            },
            "fixed": {
                "threshold": r(self.fixed_threshold),
                "mean": r(self.fixed_mean),
                "std": r(self.fixed_std),
                "images": {s.image_id: r(s.fixed_jaccard) for s in self.images},
            },
            "uncovered_fraction": {s.image_id: r(s.uncovered_fraction) for s in self.images},
        }


class EvaluationService:
    """
    Jaccard scoring against ground truth with don't-care handling, and the
    per-image and per-set threshold searches.
    """

    def __init__(self, step: float = config.THRESHOLD_STEP):
        self.thresholds = threshold_grid(step)

    @staticmethod
    def _evaluated(gt, support_count=None) -> np.ndarray:
        """Pixels that count: not don't-care and, when known, covered by some pair."""
        keep = ~gt.dont_care
        if support_count is not None:
            keep &= np.asarray(support_count) > 0
        return keep

    @staticmethod
    def jaccard(mask: np.ndarray, gt, support_count: np.ndarray | None = None) -> float:
        """
        |pred ∩ dynamic| / |pred ∪ dynamic| over evaluated pixels; 1 when both are empty.

        Raises:
            ContractViolation: If mask and ground truth differ in shape.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.labels.shape:
            raise ContractViolation(f"Mask shape {mask.shape} does not match ground truth {gt.labels.shape}.")
        keep = EvaluationService._evaluated(gt, support_count)
        pred = mask & keep
        truth = gt.dynamic & keep
        union = int(np.count_nonzero(pred | truth))
        if union == 0:
            return 1.0
        return int(np.count_nonzero(pred & truth)) / union

    def jaccard_curve(self, dmap, gt) -> np.ndarray:
        """Jaccard at every grid threshold, using sorted values instead of 101 masks."""
        if dmap.dynamic.shape != gt.labels.shape:
            raise ContractViolation(f"Map shape {dmap.dynamic.shape} does not match ground truth {gt.labels.shape}.")
        keep = self._evaluated(gt, dmap.support_count)
        values = dmap.dynamic[keep]
        truth = gt.dynamic[keep]
        positives = np.sort(values[truth])
        negatives = np.sort(values[~truth])
        tp = len(positives) - np.searchsorted(positives, self.thresholds, side="left")
        fp = len(negatives) - np.searchsorted(negatives, self.thresholds, side="left")
        union = len(positives) + fp
        return np.where(union > 0, tp / np.maximum(union, 1), 1.0)

    def best_threshold_per_image(self, dmap, gt) -> tuple[float, float]:
        curve = self.jaccard_curve(dmap, gt)
        best = int(np.argmax(curve))   # first maximum, i.e. the smallest threshold
        return float(self.thresholds[best]), float(curve[best])

    def best_threshold_per_set(self, pairs: list) -> tuple[float, float, float]:
        """
        Single threshold maximizing the mean Jaccard over (map, ground truth) pairs.

        Returns:
            (threshold, mean Jaccard, std Jaccard)
        """
        if not pairs:
            raise ContractViolation("Per-set threshold search needs at least one image with ground truth.")
        curves = np.stack([self.jaccard_curve(dmap, gt) for dmap, gt in pairs])
        means = curves.mean(axis=0)
        best = int(np.argmax(means))
        return float(self.thresholds[best]), float(means[best]), float(curves[:, best].std())

    def evaluate(self, dmaps: dict, gts: dict, fixed_threshold: float = config.THRESHOLD) -> EvalReport:
        """Scores every image that has both a dynamic map and a ground-truth mask."""
        ids = [image_id for image_id in dmaps if image_id in gts]
        report = EvalReport(fixed_threshold=fixed_threshold)
        if not ids:
            logger.warning("No image has both a dynamic map and ground truth; nothing to evaluate.")
            return report

        pairs = [(dmaps[i], gts[i]) for i in ids]
        curves = {i: self.jaccard_curve(dmaps[i], gts[i]) for i in ids}
        set_t, set_mean, set_std = self.best_threshold_per_set(pairs)
        set_index = int(np.argmax(self.thresholds >= set_t - 1e-12))
        for image_id in ids:
            dmap = dmaps[image_id]
            t, j = self.best_threshold_per_image(dmap, gts[image_id])
            fixed = self.jaccard(dmap.dynamic >= fixed_threshold, gts[image_id], dmap.support_count)
            report.images.append(ImageScore(
                image_id=image_id,
                best_threshold=t,
                best_jaccard=j,
                set_jaccard=float(curves[image_id][set_index]),
                fixed_jaccard=fixed,
                uncovered_fraction=float(np.mean(dmap.support_count == 0)),
                width=int(dmap.dynamic.shape[1]),
                height=int(dmap.dynamic.shape[0]),
            ))
            logger.info(f"Image '{image_id}': best threshold {t:.2f}, Jaccard {j:.4f}")

        best = np.array([s.best_jaccard for s in report.images])
        fixed = np.array([s.fixed_jaccard for s in report.images])
        report.per_image_mean, report.per_image_std = float(best.mean()), float(best.std())
        report.set_threshold, report.per_set_mean, report.per_set_std = set_t, set_mean, set_std
        report.fixed_mean, report.fixed_std = float(fixed.mean()), float(fixed.std())
        logger.info(
            f"Jaccard per image {report.per_image_mean:.4f} ± {report.per_image_std:.4f}; "
            f"per set {report.per_set_mean:.4f} ± {report.per_set_std:.4f} at t={set_t:.2f}"
        )
        return report
