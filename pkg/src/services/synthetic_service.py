import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import cv2
import numpy as np

from src import config
from src.services.artifact_service import ArtifactService
from src.services.feature_service import Correspondence
from src.services.geometry_service import FundamentalMatrix
from src.services.imageset_service import GroundTruthMask, Image, ImageSet, ImageSetService, Label
from src.utils.exceptions import ContractViolation, SceneInvalidError
from src.logging_config import logger

PRESETS = ("basic", "epipolar-motion", "static-control", "periodic")
TEXTURE_SIZE = 1024
PLANE_HALF_SIZE = 2.0
SPRITE_TEXTURE_SIZE = (128, 64)   # (width, height) texels
SPRITE_WIDTH = 0.64
SPRITE_HEIGHT = 0.22
SPRITE_LEVEL_STEP = 0.28
SPRITE_DEPTH = -0.5
CAMERA_DEPTH = -3.0
FOCAL_FACTOR = 1.2
MIN_PLANE_COVERAGE = 0.6


@dataclass(frozen=True)
class Camera:
    """Pinhole camera x ~ K R (X - C)."""
    K: np.ndarray
    R: np.ndarray
    C: np.ndarray

    @classmethod
    def look_at(cls, center, target, width: int, height: int, focal_factor: float = FOCAL_FACTOR) -> "Camera":
        center = np.asarray(center, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - center
        forward /= np.linalg.norm(forward)
        # Image rows grow along world +Y
        right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(np.array([0.0, 0.0, 1.0]), forward)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        focal = focal_factor * width
        K = np.array([
            [focal, 0.0, (width - 1) / 2.0],
            [0.0, focal, (height - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ])
        return cls(K=K, R=np.stack([right, down, forward]), C=center)

    @property
    def P(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, (-self.R @ self.C)[:, None]])

    def depth(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.C) @ self.R[2]

    def project(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        homogeneous = np.column_stack([points, np.ones(len(points))]) @ self.P.T
        return homogeneous[:, :2] / homogeneous[:, 2:3]

    def plane_matrix(self) -> np.ndarray:
        """Homography from world plane Z=0 coordinates (X, Y, 1) to pixels."""
        P = self.P
        return P[:, [0, 1, 3]]


@dataclass(frozen=True)
class SyntheticScene:
    name: str
    width: int
    height: int
    texture: np.ndarray
    cameras: tuple
    sprite_texture: np.ndarray
    sprite_poses: tuple            # one 3-D sprite centre per shot
    noise_sigma: float
    seed: int
    moving: bool

    @property
    def ids(self) -> list[str]:
        return [f"view_{i:02d}" for i in range(len(self.cameras))]

    def texture_matrix(self) -> np.ndarray:
        """Texture pixel (u, v, 1) -> world plane (X, Y, 1)."""
        step = 2.0 * PLANE_HALF_SIZE / self.texture.shape[0]
        origin = -PLANE_HALF_SIZE + step / 2.0
        return np.array([[step, 0.0, origin], [0.0, step, origin], [0.0, 0.0, 1.0]])

    def background_homography(self, i: int) -> np.ndarray:
        return self.cameras[i].plane_matrix() @ self.texture_matrix()

    def sprite_homography(self, i: int) -> np.ndarray:
        """Sprite texture pixel -> view i pixel for the sprite pose of shot i."""
        rows, cols = self.sprite_texture.shape[:2]
        step_x, step_y = SPRITE_WIDTH / cols, SPRITE_HEIGHT / rows
        x, y, z = self.sprite_poses[i]
        M = np.array([
            [step_x, 0.0, x - SPRITE_WIDTH / 2.0 + step_x / 2.0],
            [0.0, step_y, y - SPRITE_HEIGHT / 2.0 + step_y / 2.0],
            [0.0, 0.0, z],
            [0.0, 0.0, 1.0],
        ])
        return self.cameras[i].P @ M

    def fundamental(self, i: int, j: int) -> FundamentalMatrix:
        """F with x_j^T F x_i = 0, built as [e_j]_x P_j P_i^+."""
        P_i, P_j = self.cameras[i].P, self.cameras[j].P
        e = P_j @ np.append(self.cameras[i].C, 1.0)
        cross = np.array([[0.0, -e[2], e[1]], [e[2], 0.0, -e[0]], [-e[1], e[0], 0.0]])
        return FundamentalMatrix.from_array(cross @ P_j @ np.linalg.pinv(P_i))


def value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1)).astype(np.float32)
    return cv2.resize(grid, (size, size), interpolation=cv2.INTER_CUBIC)


class SyntheticService:
    """
    Renders planar-background scenes with a moving textured sprite, with exact
    ground-truth masks and fundamental matrices for every pair of views.
    """

    def __init__(self, image_set_service: ImageSetService | None = None,
                 artifact_service: ArtifactService | None = None):
        self.image_set_service = image_set_service or ImageSetService()
        self.artifact_service = artifact_service or ArtifactService()

    @staticmethod
    def make_texture(rng: np.random.Generator, periodic: bool = False, size: int = TEXTURE_SIZE) -> np.ndarray:
        if periodic:
            tile = SyntheticService.make_texture(rng, periodic=False, size=64)
            return np.tile(tile, (size // 64, size // 64, 1))
        u, v = np.meshgrid(np.arange(size), np.arange(size))
        checker = ((u // 64 + v // 64) % 2).astype(np.float32)
        channels = []
        for _ in range(3):
            coarse = value_noise(rng, size, 8)
            medium = value_noise(rng, size, 64)
            fine = value_noise(rng, size, 256)
            channels.append(0.35 * coarse + 0.3 * medium + 0.2 * fine + 0.15 * checker)
        texture = np.clip(np.stack(channels, axis=2), 0.0, 1.0)
        return (texture * 255.0).round().astype(np.uint8)

    @staticmethod
    def make_sprite_texture(rng: np.random.Generator, size: tuple[int, int] = SPRITE_TEXTURE_SIZE) -> np.ndarray:
        """Saturated red-orange diagonal stripes, far from any background hue mixture."""
        cols, rows = size
        u, v = np.meshgrid(np.arange(cols), np.arange(rows))
        stripes = 0.75 + 0.25 * np.sin(2.0 * math.pi * (u + v) / 16.0)

        def noise(cells):
            return cv2.resize(value_noise(rng, max(cols, rows), cells), (cols, rows), interpolation=cv2.INTER_AREA)

        red = 200.0 + 55.0 * noise(16)
        green = (40.0 + 90.0 * noise(16)) * stripes
        blue = 10.0 + 30.0 * noise(8)
        return np.clip(np.stack([red * stripes, green, blue], axis=2), 0, 255).round().astype(np.uint8)

    def build_scene(self, preset: str, seed: int = config.SEED, width: int = 640, height: int = 480) -> SyntheticScene:
        """
        Raises:
            ContractViolation: For an unknown preset name.
        """
        if preset not in PRESETS:
            raise ContractViolation(f"Unknown preset '{preset}'. Choose one of: {', '.join(PRESETS)}")
        rng = np.random.default_rng(seed)
        texture = self.make_texture(rng, periodic=(preset == "periodic"))
        sprite_texture = self.make_sprite_texture(rng)
        target = np.zeros(3)

        if preset == "epipolar-motion":
            centers = [np.array([-0.8, 0.0, CAMERA_DEPTH]), np.array([0.8, 0.0, CAMERA_DEPTH]),
                       np.array([0.0, 0.8, CAMERA_DEPTH])]
            start = np.array([0.1, -0.3, SPRITE_DEPTH])
            along = centers[1] - centers[0]
            across = np.array([-1.0, 1.0, 0.0])
            poses = [start, start + 0.45 * along / np.linalg.norm(along), start + 0.75 * across / np.linalg.norm(across)]
            noise, moving = 1.0, True
        else:
            # Collinear cameras: every epipolar plane contains the X axis line through them
            count = 4 if preset == "static-control" else 5
            xs = np.linspace(-0.8, 0.8, count) + rng.uniform(-0.04, 0.04, size=count)
            centers = [np.array([x, 0.0, CAMERA_DEPTH]) for x in xs]
            if preset == "static-control":
                fixed = np.array([*rng.uniform(-0.3, 0.3, size=2), SPRITE_DEPTH])
                poses = [fixed] * count
                noise, moving = 2.0, False
            else:
                # One sprite height per shot; an epipolar plane keeps Y fixed at the sprite depth
                levels = (np.arange(count) - (count - 1) / 2.0) * SPRITE_LEVEL_STEP
                poses = [np.array([rng.uniform(-0.3, 0.3), y, SPRITE_DEPTH]) for y in rng.permutation(levels)]
                noise, moving = 1.0, True

        cameras = tuple(Camera.look_at(c, target, width, height) for c in centers)
        scene = SyntheticScene(
            name=preset,
            width=width,
            height=height,
            texture=texture,
            cameras=cameras,
            sprite_texture=sprite_texture,
            sprite_poses=tuple(np.asarray(p, dtype=np.float64) for p in poses),
            noise_sigma=noise,
            seed=seed,
            moving=moving,
        )
        logger.info(f"Built synthetic scene '{preset}' with {len(cameras)} cameras at {width}x{height}")
        return scene

    @staticmethod
    def validate_scene(scene: SyntheticScene):
        """
        Raises:
            SceneInvalidError: If a camera sees the plane from behind or sees too little of it.
        """
        step = max(4, min(scene.width, scene.height) // 32)
        us, vs = np.meshgrid(np.arange(0, scene.width, step), np.arange(0, scene.height, step))
        pixels = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)])
        for index, camera in enumerate(scene.cameras):
            world = np.linalg.inv(camera.plane_matrix()) @ pixels
            with np.errstate(divide="ignore", invalid="ignore"):
                xy = world[:2] / world[2]
            points = np.column_stack([xy.T, np.zeros(xy.shape[1])])
            in_front = camera.depth(points) > 0
            inside = np.all(np.abs(xy) <= PLANE_HALF_SIZE, axis=0)
            coverage = float(np.mean(in_front & inside))
            if camera.depth(np.zeros(3))[0] <= 0 or coverage < MIN_PLANE_COVERAGE:
                raise SceneInvalidError(
                    f"Camera {index} does not view the background plane (coverage {coverage:.2f})."
                )
            if camera.depth(scene.sprite_poses[index])[0] <= 0:
                raise SceneInvalidError(f"The sprite is behind camera {index}.")

    def render_view(self, scene: SyntheticScene, index: int) -> tuple[Image, GroundTruthMask]:
        size = (scene.width, scene.height)
        background = cv2.warpPerspective(scene.texture, scene.background_homography(index), size,
                                         flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
        H_sprite = scene.sprite_homography(index)
        sprite = cv2.warpPerspective(scene.sprite_texture, H_sprite, size,
                                     flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        footprint = cv2.warpPerspective(np.ones(scene.sprite_texture.shape[:2], np.uint8), H_sprite, size,
                                        flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0) > 0

        composite = np.where(footprint[..., None], sprite, background).astype(np.float64)
        if scene.noise_sigma > 0:
            rng = np.random.default_rng([scene.seed, index])
            composite += rng.normal(0.0, scene.noise_sigma, composite.shape)
        pixels = np.clip(np.round(composite), 0, 255).astype(np.uint8)

        labels = np.full(footprint.shape, Label.STATIC, dtype=np.uint8)
        if scene.moving:
            labels[footprint] = Label.DYNAMIC
        image_id = scene.ids[index]
        return Image(id=image_id, pixels=pixels), GroundTruthMask(image_id=image_id, labels=labels)

    def render(self, scene: SyntheticScene, threads: int = 1):
        """
        Returns:
            (ImageSet, [GroundTruthMask per view], {(id_i, id_j): FundamentalMatrix} for all ordered pairs)
        """
        self.validate_scene(scene)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            views = list(pool.map(lambda i: self.render_view(scene, i), range(len(scene.cameras))))
        images = tuple(image for image, _ in views)
        masks = [mask for _, mask in views]
        fmatrices = {
            (scene.ids[i], scene.ids[j]): scene.fundamental(i, j)
            for i in range(len(scene.cameras)) for j in range(len(scene.cameras)) if i != j
        }
        return ImageSet(name=scene.name, images=images), masks, fmatrices

    @staticmethod
    def correspondences(scene: SyntheticScene, i: int, j: int, count: int,
                        outlier_ratio: float = 0.0, seed: int = 0):
        """
        Ground-truth matches of random 3-D points seen by views i and j, with a
        share of support-side points replaced by uniform outliers.

        Returns:
            (list of Correspondence, bool array, True for inliers)
        """
        rng = np.random.default_rng(seed)
        cam_i, cam_j = scene.cameras[i], scene.cameras[j]
        limit = np.array([scene.width - 0.5, scene.height - 0.5])
        x_i = np.zeros((0, 2))
        x_j = np.zeros((0, 2))
        while len(x_i) < count:
            points = rng.uniform([-1.0, -1.0, -1.5], [1.0, 1.0, 0.5], size=(4 * count, 3))
            a, b = cam_i.project(points), cam_j.project(points)
            visible = (
                (cam_i.depth(points) > 0) & (cam_j.depth(points) > 0)
                & np.all((a >= -0.5) & (a <= limit), axis=1) & np.all((b >= -0.5) & (b <= limit), axis=1)
            )
            x_i = np.vstack([x_i, a[visible]])
            x_j = np.vstack([x_j, b[visible]])
        x_i, x_j = x_i[:count], x_j[:count].copy()

        inliers = np.ones(count, dtype=bool)
        outliers = rng.choice(count, size=int(round(count * outlier_ratio)), replace=False)
        x_j[outliers] = rng.uniform([0.0, 0.0], [scene.width - 1.0, scene.height - 1.0], size=(len(outliers), 2))
        inliers[outliers] = False
        matches = [
            Correspondence(x_ref=(float(p[0]), float(p[1])), x_sup=(float(q[0]), float(q[1])), score=1.0)
            for p, q in zip(x_i, x_j)
        ]
        return matches, inliers

    def write(self, scene: SyntheticScene, output_dir: str, threads: int = 1) -> ImageSet:
        """Writes views, gt/ masks and fmatrices.json in the formats `detect` reads."""
        image_set, masks, fmatrices = self.render(scene, threads=threads)
        gt_dir = os.path.join(output_dir, config.GROUND_TRUTH_DIRNAME)
        os.makedirs(gt_dir, exist_ok=True)
        for image, mask in zip(image_set, masks):
            self.image_set_service.save_image(image, os.path.join(output_dir, f"{image.id}.png"))
            self.artifact_service.write_ground_truth(os.path.join(gt_dir, f"{image.id}.png"), mask)
        self.artifact_service.write_json(
            os.path.join(output_dir, "fmatrices.json"),
            {f"{a}|{b}": [round(v, 15) for v in F.to_list()] for (a, b), F in fmatrices.items()},
        )
        logger.info(f"Wrote synthetic set '{scene.name}' ({len(image_set)} views) to {output_dir}")
        return image_set
