from dataclasses import dataclass

import cv2
import numpy as np

from src import config
from src.logging_config import logger


@dataclass(frozen=True)
class Correspondence:
    """A putative match between a reference pixel and a support pixel."""
    x_ref: tuple[float, float]
    x_sup: tuple[float, float]
    score: float


@dataclass(frozen=True)
class Features:
    points: np.ndarray       # (N, 2) sub-pixel (x, y)
    descriptors: np.ndarray  # (N, window*window) zero-mean, unit-norm


def stack_points(matches: list[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    """Returns (N, 2) reference and support coordinate arrays."""
    if not matches:
        return np.zeros((0, 2)), np.zeros((0, 2))
    x_ref = np.array([m.x_ref for m in matches], dtype=np.float64)
    x_sup = np.array([m.x_sup for m in matches], dtype=np.float64)
    return x_ref, x_sup


class FeatureService:
    """
    Harris corners with non-maximal suppression, matched by normalized
    cross-correlation of square windows and filtered by a ratio test.
    """

    def __init__(self, max_corners: int = config.HARRIS_MAX_CORNERS,
                 window: int = config.NCC_WINDOW, ratio: float = config.NCC_RATIO):
        self.max_corners = max_corners
        self.window = window
        self.ratio = ratio

    @staticmethod
    def harris_response(gray: np.ndarray, ksize: int = 3, k: float = config.HARRIS_K) -> np.ndarray:
        # Structure tensor from Sobel gradients, smoothed by a Gaussian window
        ix = cv2.Sobel(gray, cv2.CV_32F, 1, 0)
        iy = cv2.Sobel(gray, cv2.CV_32F, 0, 1)
        m11 = cv2.GaussianBlur(ix * ix, (ksize, ksize), 0)
        m22 = cv2.GaussianBlur(iy * iy, (ksize, ksize), 0)
        m12 = cv2.GaussianBlur(ix * iy, (ksize, ksize), 0)
        return m11 * m22 - m12 * m12 - k * (m11 + m22) ** 2

    def detect_corners(self, gray: np.ndarray) -> np.ndarray:
        """Returns up to `max_corners` sub-pixel corner locations as (N, 2) (x, y)."""
        response = self.harris_response(gray)
        peak = float(response.max())
        if peak <= 1e-8:
            return np.zeros((0, 2))

        size = 2 * config.HARRIS_NMS_RADIUS + 1
        local_max = cv2.dilate(response, np.ones((size, size), np.uint8))
        keep = (response >= local_max) & (response > config.HARRIS_RELATIVE_THRESHOLD * peak)

        # Corners need a full matching window and a 3x3 neighbourhood for refinement
        margin = max(self.window // 2, 1) + 1
        keep[:margin, :] = False
        keep[-margin:, :] = False
        keep[:, :margin] = False
        keep[:, -margin:] = False

        ys, xs = np.nonzero(keep)
        if xs.size == 0:
            return np.zeros((0, 2))
        strength = response[ys, xs]
        order = np.lexsort((xs, ys, -strength))[: self.max_corners]
        ys, xs = ys[order], xs[order]

        # Quadratic peak interpolation of the response
        def offset(minus, centre, plus):
            denom = minus - 2.0 * centre + plus
            with np.errstate(divide="ignore", invalid="ignore"):
                delta = np.where(np.abs(denom) > 1e-12, 0.5 * (minus - plus) / denom, 0.0)
            return np.clip(delta, -0.5, 0.5)

        r = response.astype(np.float64)
        dx = offset(r[ys, xs - 1], r[ys, xs], r[ys, xs + 1])
        dy = offset(r[ys - 1, xs], r[ys, xs], r[ys + 1, xs])
        return np.column_stack([xs + dx, ys + dy])

    def describe(self, gray: np.ndarray, points: np.ndarray) -> Features:
        """Cuts zero-mean, unit-norm windows around each corner; flat windows are dropped."""
        if len(points) == 0:
            return Features(points=np.zeros((0, 2)), descriptors=np.zeros((0, self.window ** 2)))
        half = self.window // 2
        offsets = np.arange(-half, half + 1)
        cols = np.rint(points[:, 0]).astype(int)[:, None, None] + offsets[None, None, :]
        rows = np.rint(points[:, 1]).astype(int)[:, None, None] + offsets[None, :, None]
        windows = gray[rows, cols].reshape(len(points), -1).astype(np.float64)
        windows -= windows.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(windows, axis=1)
        textured = norms > 1e-6
        return Features(
            points=points[textured],
            descriptors=windows[textured] / norms[textured, None],
        )

    def extract(self, image) -> Features:
        gray = cv2.cvtColor(image.as_float(), cv2.COLOR_RGB2GRAY)
        features = self.describe(gray, self.detect_corners(gray))
        logger.debug(f"Extracted {len(features.points)} corners from image '{image.id}'")
        return features

    def match(self, a: Features, b: Features) -> list[Correspondence]:
        """Nearest neighbour by NCC with a distance-ratio test."""
        if len(a.points) == 0 or len(b.points) == 0:
            return []
        ncc = a.descriptors @ b.descriptors.T
        # Euclidean distance between unit vectors
        dist = np.sqrt(np.clip(2.0 - 2.0 * ncc, 0.0, None))

        if dist.shape[1] == 1:
            best = np.zeros(len(a.points), dtype=int)
            accepted = ncc[:, 0] > 0.8
        else:
            order = np.argsort(dist, axis=1, kind="stable")
            best, second = order[:, 0], order[:, 1]
            rows = np.arange(len(a.points))
            accepted = dist[rows, best] < self.ratio * dist[rows, second]

        matches = []
        for i in np.flatnonzero(accepted):
            j = best[i]
            matches.append(Correspondence(
                x_ref=(float(a.points[i, 0]), float(a.points[i, 1])),
                x_sup=(float(b.points[j, 0]), float(b.points[j, 1])),
                score=float(np.clip((ncc[i, j] + 1.0) / 2.0, 0.0, 1.0)),
            ))
        return matches

    def detect_and_match(self, a, b) -> list[Correspondence]:
        matches = self.match(self.extract(a), self.extract(b))
        logger.info(f"Putative matches '{a.id}' -> '{b.id}': {len(matches)}")
        return matches
