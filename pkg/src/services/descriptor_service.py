import math
from dataclasses import dataclass
from enum import Enum

import cv2
import numpy as np

from src import config
from src.utils.exceptions import ContractViolation

# Elements of the (rows, candidates, dims) block evaluated at once by the histogram measure
SIMILARITY_BLOCK = 4_000_000


class DescriptorKind(str, Enum):
    HOG = "hog"
    HS_HIST = "hs_hist"


@dataclass(frozen=True)
class DescriptorVector:
    kind: DescriptorKind
    values: np.ndarray


def hog(grid: np.ndarray, bins: int = config.HOG_BINS, cells: int = config.HOG_CELLS,
        epsilon: float = config.HOG_EPSILON) -> np.ndarray:
    """
    Single-block HOG of one (h, w) or a batch of (N, h, w) grayscale grids.

    Unsigned orientations, magnitude-weighted votes into `cells` x `cells`
    cells, block normalized as v / sqrt(|v|^2 + eps^2).
    """
    grids = np.asarray(grid, dtype=np.float64)
    single = grids.ndim == 2
    if single:
        grids = grids[None]
    count, height, width = grids.shape
    gy, gx = np.gradient(grids, axis=(1, 2))
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx) % math.pi
    bin_index = np.minimum((orientation / (math.pi / bins)).astype(np.int64), bins - 1)

    cell_row = (np.arange(height) * cells // height)[:, None]
    cell_col = (np.arange(width) * cells // width)[None, :]
    cell_index = cell_row * cells + cell_col
    dims = cells * cells * bins
    flat = (np.arange(count)[:, None, None] * dims + cell_index[None] * bins + bin_index).reshape(-1)
    histogram = np.bincount(flat, weights=magnitude.reshape(-1), minlength=count * dims).reshape(count, dims)

    norms = np.sqrt(np.sum(histogram ** 2, axis=1, keepdims=True) + epsilon ** 2)
    histogram = histogram / norms
    return histogram[0] if single else histogram


def hs_histogram(hsv: np.ndarray, valid: np.ndarray | None = None, bins: int = config.HS_BINS) -> np.ndarray:
    """
    Joint hue-saturation histogram of one (h, w, 3) or a batch of (N, h, w, 3)
    HSV grids (H in degrees [0, 360), S in [0, 1]), normalized to sum 1.
    Samples flagged invalid are not counted; with none left the histogram is zero.
    """
    grids = np.asarray(hsv, dtype=np.float64)
    single = grids.ndim == 3
    if single:
        grids = grids[None]
    count = grids.shape[0]
    if valid is None:
        valid = np.ones(grids.shape[:3], dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(count, -1)

    hue = np.clip((grids[..., 0] / 360.0 * bins).astype(np.int64), 0, bins - 1).reshape(count, -1)
    sat = np.clip((grids[..., 1] * bins).astype(np.int64), 0, bins - 1).reshape(count, -1)
    dims = bins * bins
    flat = (np.arange(count)[:, None] * dims + hue * bins + sat).reshape(-1)
    histogram = np.bincount(flat, weights=valid.reshape(-1).astype(np.float64),
                            minlength=count * dims).reshape(count, dims)

    totals = histogram.sum(axis=1, keepdims=True)
    histogram = np.divide(histogram, totals, out=np.zeros_like(histogram), where=totals > 0)
    return histogram[0] if single else histogram


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, D) x (M, D) -> (N, M) cosine similarity clipped to [0, 1]; zero vectors score 0."""
    norm_a = np.linalg.norm(a, axis=1)
    norm_b = np.linalg.norm(b, axis=1)
    denom = np.outer(norm_a, norm_b)
    scores = np.divide(a @ b.T, denom, out=np.zeros(denom.shape), where=denom > 0)
    return np.clip(scores, 0.0, 1.0)


def histogram_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, D) x (M, D) -> (N, M) sum(min) / sum(max); zero histograms score 0."""
    sums_a = a.sum(axis=1)
    sums_b = b.sum(axis=1)
    scores = np.zeros((len(a), len(b)))
    rows = max(1, SIMILARITY_BLOCK // max(1, b.size))
    for begin in range(0, len(a), rows):
        block = a[begin:begin + rows]
        intersection = np.minimum(block[:, None, :], b[None, :, :]).sum(axis=2)
        union = sums_a[begin:begin + rows, None] + sums_b[None, :] - intersection
        scores[begin:begin + rows] = np.divide(intersection, union, out=np.zeros(union.shape), where=union > 0)
    return scores


class DescriptorService:
    """
    Patch descriptors and their similarity measures.
    """

    def __init__(self, run_config: config.RunConfig | None = None):
        self.run_config = run_config or config.RunConfig()
        self.kinds = [DescriptorKind(name) for name in self.run_config.descriptors]

    def describe(self, kind: DescriptorKind, samples: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Descriptors of a batch of warped RGB grids (N, h, w, 3) in [0, 1]."""
        kind = DescriptorKind(kind)
        count, height, width = samples.shape[:3]
        if count == 0:
            dims = config.HOG_CELLS ** 2 * config.HOG_BINS if kind is DescriptorKind.HOG else self.run_config.hs_bins ** 2
            return np.zeros((0, dims))
        stacked = np.ascontiguousarray(samples, dtype=np.float32).reshape(count * height, width, 3)
        if kind is DescriptorKind.HOG:
            gray = cv2.cvtColor(stacked, cv2.COLOR_RGB2GRAY).reshape(count, height, width)
            return hog(gray)
        hsv = cv2.cvtColor(stacked, cv2.COLOR_RGB2HSV).reshape(count, height, width, 3)
        return hs_histogram(hsv, valid, bins=self.run_config.hs_bins)

    def describe_all(self, samples: np.ndarray, valid: np.ndarray) -> dict:
        return {kind: self.describe(kind, samples, valid) for kind in self.kinds}

    @staticmethod
    def similarity(a: DescriptorVector, b: DescriptorVector) -> float:
        """
        Raises:
            ContractViolation: If the two vectors are of different kinds.
        """
        if a.kind != b.kind:
            raise ContractViolation(f"Cannot compare a {a.kind.value} descriptor with a {b.kind.value} descriptor.")
        return float(DescriptorService.similarity_matrix(a.kind, a.values[None], b.values[None])[0, 0])

    @staticmethod
    def similarity_matrix(kind: DescriptorKind, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if DescriptorKind(kind) is DescriptorKind.HOG:
            return cosine_similarity(a, b)
        return histogram_iou(a, b)

    @staticmethod
    def best_similarity(kind: DescriptorKind, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Per row of `a`, the maximum similarity over all rows of `b` (0 when `b` is empty)."""
        if len(b) == 0:
            return np.zeros(len(a))
        return DescriptorService.similarity_matrix(kind, a, b).max(axis=1)
