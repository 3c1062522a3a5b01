import json
import os

import cv2
import numpy as np

from src.utils.exceptions import AppError
from src.logging_config import logger

OVERLAY_ALPHA = 0.5
OVERLAY_COLOR = (255, 0, 0)  # RGB


class ArtifactService:
    """
    Writes maps, masks, overlays and JSON reports. Every writer is a pure
    function of its inputs so reruns produce byte-identical files.
    """

    @staticmethod
    def _ensure_parent(path: str):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    @staticmethod
    def _imwrite(path: str, array: np.ndarray):
        ArtifactService._ensure_parent(path)
        if not cv2.imwrite(path, array):
            logger.error(f"Failed to write artifact {path}")
            raise AppError(f"Failed to write artifact: {path}")
        logger.debug(f"Wrote {path}")

    @staticmethod
    def to_uint16(probability: np.ndarray) -> np.ndarray:
        return np.round(np.clip(probability, 0.0, 1.0) * 65535.0).astype(np.uint16)

    def write_probability_map(self, path: str, probability: np.ndarray):
        """16-bit grayscale, value round(P * 65535)."""
        self._imwrite(path, self.to_uint16(probability))

    @staticmethod
    def heatmap(probability: np.ndarray) -> np.ndarray:
        """BGR rendering with OpenCV's fixed 256-entry JET table, blue = 0 to red = 1."""
        levels = np.round(np.clip(probability, 0.0, 1.0) * 255.0).astype(np.uint8)
        return cv2.applyColorMap(levels, cv2.COLORMAP_JET)

    def write_heatmap(self, path: str, probability: np.ndarray):
        self._imwrite(path, self.heatmap(probability))

    def write_mask(self, path: str, mask: np.ndarray):
        self._imwrite(path, np.where(mask, 255, 0).astype(np.uint8))

    def write_ground_truth(self, path: str, gt):
        self._imwrite(path, gt.to_codes())

    @staticmethod
    def overlay(image, mask: np.ndarray) -> np.ndarray:
        """Reference pixels with the mask blended in red; returned as RGB."""
        rgb = np.asarray(image.pixels)
        tint = np.empty_like(rgb)
        tint[...] = OVERLAY_COLOR
        blended = cv2.addWeighted(rgb, 1.0 - OVERLAY_ALPHA, tint, OVERLAY_ALPHA, 0)
        return np.where(mask[..., None], blended, rgb)

    def write_overlay(self, path: str, image, mask: np.ndarray):
        self._imwrite(path, cv2.cvtColor(self.overlay(image, mask), cv2.COLOR_RGB2BGR))

    def write_json(self, path: str, data: dict):
        self._ensure_parent(path)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(data, handle, indent=2, sort_keys=True)
            handle.write("\n")
        logger.info(f"Wrote {path}")

    @staticmethod
    def patch_svg(patch_set, max_patches: int | None = None) -> str:
        """Outlines of the patch quadrilaterals over the image rectangle."""
        corners = patch_set.corners if max_patches is None else patch_set.corners[:max_patches]
        lines = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{patch_set.width}" height="{patch_set.height}" '
            f'viewBox="-0.5 -0.5 {patch_set.width} {patch_set.height}">',
            f'<rect x="-0.5" y="-0.5" width="{patch_set.width}" height="{patch_set.height}" '
            f'fill="none" stroke="black"/>',
        ]
        colors = ("#d62728", "#2ca02c", "#1f77b4")
        for patch, quad in zip(patch_set.patches, corners):
            points = " ".join(f"{x:.2f},{y:.2f}" for x, y in quad)
            color = colors[patch.family % 3] if patch.family >= 0 else "#7f7f7f"
            lines.append(f'<polygon points="{points}" fill="none" stroke="{color}" stroke-width="0.3"/>')
        lines.append("</svg>")
        return "\n".join(lines) + "\n"

    def write_patch_svg(self, path: str, patch_set):
        self._ensure_parent(path)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(self.patch_svg(patch_set))
        logger.debug(f"Wrote {path}")
