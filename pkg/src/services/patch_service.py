import math
from dataclasses import dataclass, field
from functools import cached_property, partial

import cv2
import numpy as np

from src import config
from src.services.geometry_service import Epipole, GeometryService, PairGeometry
from src.utils.exceptions import DegeneratePatchError
from src.logging_config import logger

TWO_PI = 2.0 * math.pi
SHIFT_CLASSES = (0.0, 1.0 / 3.0, 2.0 / 3.0)
# Epipoles farther than this many image diagonals are treated as points at infinity
FAR_EPIPOLE_DIAGONALS = 1e4
WARP_CHUNK = 1024


def width_class_name(factor: float) -> str:
    if math.isclose(factor, 1.0):
        return "nominal"
    return "narrow" if factor < 1.0 else "wide"


def image_extent(width: int, height: int) -> np.ndarray:
    """Image rectangle in pixel coordinates; pixel centres sit on integers."""
    return np.array([
        [-0.5, -0.5],
        [width - 0.5, -0.5],
        [width - 0.5, height - 0.5],
        [-0.5, height - 0.5],
    ])


def direction(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def clip_polygon(polygon: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Sutherland-Hodgman clip against the half-plane normal·p >= offset."""
    if len(polygon) == 0:
        return polygon
    kept = []
    distances = polygon @ normal - offset
    for i in range(len(polygon)):
        cur, prev = polygon[i], polygon[i - 1]
        dc, dp = distances[i], distances[i - 1]
        if dc >= 0:
            if dp < 0:
                kept.append(prev + (cur - prev) * (dp / (dp - dc)))
            kept.append(cur)
        elif dp >= 0:
            kept.append(prev + (cur - prev) * (dp / (dp - dc)))
    return np.array(kept, dtype=np.float64).reshape(-1, 2)


def polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


@dataclass(frozen=True)
class PencilFrame:
    """
    Coordinates of an epipolar pencil in one image.

    Finite frames parametrize lines by the angle of the ray leaving the
    epipole `origin`; the along-line coordinate is the projection onto the
    row bisector. Parallel frames (epipole at or near infinity) use the
    offset p·normal and the along-line coordinate p·direction.
    """
    finite: bool
    epipole: Epipole
    origin: np.ndarray
    direction: np.ndarray
    normal: np.ndarray

    @classmethod
    def for_image(cls, epipole: Epipole, width: int, height: int) -> "PencilFrame":
        e = epipole.vector
        center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        diagonal = math.hypot(width, height)
        euclidean = epipole.euclidean()
        if euclidean is None or np.linalg.norm(euclidean - center) > FAR_EPIPOLE_DIAGONALS * diagonal:
            d = np.array([e[0], e[1]], dtype=np.float64)
            d /= np.linalg.norm(d)
            if d[0] < 0 or (d[0] == 0 and d[1] < 0):
                d = -d
            return cls(finite=False, epipole=epipole, origin=np.zeros(2), direction=d,
                       normal=np.array([-d[1], d[0]]))
        return cls(finite=True, epipole=epipole, origin=np.asarray(euclidean, dtype=np.float64),
                   direction=np.zeros(2), normal=np.zeros(2))

    def line(self, param: float) -> np.ndarray:
        """Homogeneous line of the pencil at `param`, exactly through the epipole."""
        if self.finite:
            u = direction(param)
            line = np.array([-u[1], u[0], u[1] * self.origin[0] - u[0] * self.origin[1]])
        else:
            point = param * self.normal
            line = np.cross(self.epipole.vector, np.array([point[0], point[1], 1.0]))
        return line / math.hypot(line[0], line[1])

    def strip_height(self, lo: float, hi: float, t: float) -> float:
        """Width across the strip between two pencil members at along-coordinate t."""
        if self.finite:
            return 2.0 * t * math.tan((hi - lo) / 2.0)
        return hi - lo

    def strip_range(self, lo: float, hi: float, extent: np.ndarray,
                    exclusion: float = 0.0) -> tuple[float, float] | None:
        """Along-line interval [tmin, tmax] of the strip between `lo` and `hi` inside `extent`."""
        if self.finite:
            e = self.origin
            n_lo = np.array([-math.sin(lo), math.cos(lo)])
            n_hi = np.array([math.sin(hi), -math.cos(hi)])
            polygon = clip_polygon(extent, n_lo, float(n_lo @ e))
            polygon = clip_polygon(polygon, n_hi, float(n_hi @ e))
            if len(polygon) < 3:
                return None
            t = (polygon - e) @ direction((lo + hi) / 2.0)
            tmin, tmax = max(float(t.min()), exclusion), float(t.max())
        else:
            polygon = clip_polygon(extent, self.normal, lo)
            polygon = clip_polygon(polygon, -self.normal, -hi)
            if len(polygon) < 3:
                return None
            t = polygon @ self.direction
            tmin, tmax = float(t.min()), float(t.max())
        if tmax - tmin <= 1e-9:
            return None
        return tmin, tmax

    def corners(self, lo: float, hi: float, t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
        """(N, 4, 2) corners c0=(lo,t0), c1=(lo,t1), c2=(hi,t1), c3=(hi,t0)."""
        t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
        t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
        if self.finite:
            # A ray point whose projection on the bisector is t lies t / cos(half gap) out
            stretch = 1.0 / math.cos((hi - lo) / 2.0)

            def point(param, t):
                return self.origin + (t * stretch)[:, None] * direction(param)
        else:
            def point(param, t):
                return param * self.normal + t[:, None] * self.direction
        return np.stack([point(lo, t0), point(lo, t1), point(hi, t1), point(hi, t0)], axis=1)

    def center(self, lo: float, hi: float, t: float) -> np.ndarray:
        if self.finite:
            return self.origin + t * direction((lo + hi) / 2.0)
        return ((lo + hi) / 2.0) * self.normal + t * self.direction


@dataclass(frozen=True)
class EpipolarPencil:
    """
    Three interleaved families of pencil members (shifts 0, 1/3 and 2/3 of
    the gap). For a finite frame the parameters are ray angles; for a
    parallel frame they are signed offsets in pixels.
    """
    frame: PencilFrame
    width: int
    height: int
    start: float
    gap: float
    rows: int
    full_circle: bool
    exclusion_radius: float
    target_height: float
    angles: np.ndarray
    shift_classes: np.ndarray

    def row_bounds(self, family: int, row: int) -> tuple[float, float]:
        lo = self.start + (row + SHIFT_CLASSES[family]) * self.gap
        return lo, lo + self.gap


@dataclass(frozen=True)
class EpipolarPatch:
    owner_id: str
    bounds: tuple[float, float]      # (lo, hi) pencil parameters
    radial: tuple[float, float]      # (t0, t1) along the row
    corners: np.ndarray              # (4, 2): c0=(lo,t0), c1=(lo,t1), c2=(hi,t1), c3=(hi,t0)
    center: np.ndarray
    shift_class: float = 0.0
    family: int = -1
    row: int = -1
    row_mid: float = 0.0
    row_height: float = 0.0
    lines: np.ndarray | None = None  # bounding lines lo, hi and the row's mid line
    width_class: str = "nominal"


@dataclass
class PatchSet:
    """Reference patches plus an incidence list pixel -> covering patch."""
    image_id: str
    width: int
    height: int
    pencil: EpipolarPencil
    patches: list
    corners: np.ndarray
    centers: np.ndarray
    pixel_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    patch_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.patches)

    def coverage_counts(self) -> np.ndarray:
        counts = np.bincount(self.pixel_ids, minlength=self.width * self.height)
        return counts.reshape(self.height, self.width)

    def patches_covering(self, x: int, y: int) -> list[int]:
        return sorted(int(i) for i in self.patch_ids[self.pixel_ids == y * self.width + x])

    @property
    def max_distance(self) -> float:
        return float(self.distances.max()) if self.distances.size else 0.0

    def row_groups(self) -> list[np.ndarray]:
        """Patch indices grouped by (family, row) in enumeration order."""
        groups: dict = {}
        for index, patch in enumerate(self.patches):
            groups.setdefault((patch.family, patch.row), []).append(index)
        return [np.array(indices, dtype=np.int64) for indices in groups.values()]


@dataclass
class CandidateSet:
    reference_patch: EpipolarPatch
    support_id: str
    corners: np.ndarray       # (M, 4, 2)
    width_classes: list       # one name per candidate
    scale: float = 1.0

    def __len__(self) -> int:
        return len(self.corners)

    @property
    def is_empty(self) -> bool:
        return len(self.corners) == 0

    @cached_property
    def patches(self) -> list[EpipolarPatch]:
        return [
            EpipolarPatch(
                owner_id=self.support_id,
                bounds=self.reference_patch.bounds,
                radial=(0.0, 0.0),
                corners=corners,
                center=corners.mean(axis=0),
                width_class=name,
            )
            for corners, name in zip(self.corners, self.width_classes)
        ]


class PatchService:
    """
    Epipolar pencils, patch decomposition, candidate strips and quadrilateral warping.
    """

    def __init__(self, run_config: config.RunConfig | None = None):
        self.run_config = run_config or config.RunConfig()

    def build_pencil(self, image, e: Epipole, target_height: float | None = None) -> EpipolarPencil:
        target_height = float(target_height or self.run_config.target_height)
        frame = PencilFrame.for_image(e, image.width, image.height)
        extent = image_extent(image.width, image.height)
        center = np.array([(image.width - 1) / 2.0, (image.height - 1) / 2.0])
        diagonal = math.hypot(image.width, image.height)
        full_circle = False
        exclusion = 0.0
        minimum_rows = 1

        if not frame.finite:
            offsets = extent @ frame.normal
            start, span = float(offsets.min()), float(offsets.max() - offsets.min())
            base_gap = target_height
        else:
            inside = (-0.5 <= frame.origin[0] <= image.width - 0.5
                      and -0.5 <= frame.origin[1] <= image.height - 0.5)
            to_center = center - frame.origin
            if inside:
                full_circle = True
                start, span = 0.0, TWO_PI
                reference_distance = max(float(np.linalg.norm(to_center)), 0.25 * diagonal)
                minimum_rows = 3
                logger.info(f"Epipole inside image '{image.id}' at {frame.origin.round(1).tolist()}")
            else:
                center_angle = math.atan2(to_center[1], to_center[0])
                corner_angles = np.arctan2(extent[:, 1] - frame.origin[1], extent[:, 0] - frame.origin[0])
                relative = (corner_angles - center_angle + math.pi) % TWO_PI - math.pi
                start = center_angle + float(relative.min())
                span = float(relative.max() - relative.min())
                reference_distance = float(np.linalg.norm(to_center))
            exclusion = self.run_config.exclusion_factor * target_height
            base_gap = target_height / reference_distance

        rows = max(minimum_rows, int(math.ceil(span / base_gap - 1e-9)))
        gap = span / rows

        lowers, shifts = [], []
        for shift in SHIFT_CLASSES:
            lower = start + (np.arange(rows) + shift) * gap
            lowers.append(lower % TWO_PI if frame.finite else lower)
            shifts.append(np.full(rows, shift))
        lowers = np.concatenate(lowers)
        shifts = np.concatenate(shifts)
        order = np.argsort(lowers, kind="stable")

        logger.debug(
            f"Pencil for '{image.id}': {'finite' if frame.finite else 'parallel'} frame, "
            f"{rows} rows per family, gap {gap:.6g}"
        )
        return EpipolarPencil(
            frame=frame,
            width=image.width,
            height=image.height,
            start=start,
            gap=gap,
            rows=rows,
            full_circle=full_circle,
            exclusion_radius=exclusion,
            target_height=target_height,
            angles=lowers[order],
            shift_classes=shifts[order],
        )

    def decompose_reference(self, image, pencil: EpipolarPencil) -> PatchSet:
        """
        Slices every row of every family into patches of length target_height
        with a stride of a third of that length, then indexes pixel coverage.
        """
        frame = pencil.frame
        extent = image_extent(image.width, image.height)
        w = pencil.target_height
        stride = w / 3.0

        patches: list[EpipolarPatch] = []
        # Per family and row: (first patch id, count, tmin)
        row_tables = []
        for family, shift in enumerate(SHIFT_CLASSES):
            table = np.zeros((pencil.rows, 3))
            for row in range(pencil.rows):
                lo, hi = pencil.row_bounds(family, row)
                table[row, 0] = len(patches)
                span = frame.strip_range(lo, hi, extent, pencil.exclusion_radius)
                if span is None:
                    continue
                tmin, tmax = span
                length = tmax - tmin
                count = 1 if length <= w else int(math.ceil((length - w) / stride - 1e-9)) + 1
                table[row, 1:] = count, tmin

                t0 = tmin + np.arange(count) * stride
                corners = frame.corners(lo, hi, t0, t0 + w)
                row_mid = (tmin + tmax) / 2.0
                lines = np.stack([frame.line(lo), frame.line(hi), frame.line((lo + hi) / 2.0)])
                height = frame.strip_height(lo, hi, row_mid)
                for j in range(count):
                    patches.append(EpipolarPatch(
                        owner_id=image.id,
                        bounds=(lo, hi),
                        radial=(float(t0[j]), float(t0[j] + w)),
                        corners=corners[j],
                        center=frame.center(lo, hi, float(t0[j] + w / 2.0)),
                        shift_class=shift,
                        family=family,
                        row=row,
                        row_mid=row_mid,
                        row_height=height,
                        lines=lines,
                    ))
            row_tables.append(table)

        corners = np.array([p.corners for p in patches]).reshape(-1, 4, 2)
        centers = np.array([p.center for p in patches]).reshape(-1, 2)
        pixel_ids, patch_ids = self._coverage(image.width, image.height, pencil, row_tables, stride, w)
        ys, xs = np.divmod(pixel_ids, image.width)
        distances = np.hypot(xs - centers[patch_ids, 0], ys - centers[patch_ids, 1])

        patch_set = PatchSet(
            image_id=image.id,
            width=image.width,
            height=image.height,
            pencil=pencil,
            patches=patches,
            corners=corners,
            centers=centers,
            pixel_ids=pixel_ids,
            patch_ids=patch_ids,
            distances=distances,
        )
        logger.debug(f"Decomposed '{image.id}' into {len(patches)} patches")
        return patch_set

    @staticmethod
    def _coverage(width, height, pencil, row_tables, stride, w):
        frame = pencil.frame
        ys, xs = np.mgrid[0:height, 0:width]
        xs = xs.reshape(-1).astype(np.float64)
        ys = ys.reshape(-1).astype(np.float64)
        ids = np.arange(width * height, dtype=np.int64)

        if frame.finite:
            dx, dy = xs - frame.origin[0], ys - frame.origin[1]
            angle = np.arctan2(dy, dx)
            outside_disk = np.hypot(dx, dy) >= pencil.exclusion_radius
        else:
            offset = xs * frame.normal[0] + ys * frame.normal[1]
            along = xs * frame.direction[0] + ys * frame.direction[1]
            outside_disk = np.ones(xs.shape, dtype=bool)

        pixel_parts, patch_parts = [], []
        for family, shift in enumerate(SHIFT_CLASSES):
            table = row_tables[family]
            if frame.finite:
                relative = (angle - pencil.start - shift * pencil.gap) % TWO_PI
            else:
                relative = offset - pencil.start - shift * pencil.gap
            row = np.floor(relative / pencil.gap).astype(np.int64)
            in_rows = (row >= 0) & (row < pencil.rows) & outside_disk
            row = np.clip(row, 0, pencil.rows - 1)

            if frame.finite:
                mid = pencil.start + (row + shift + 0.5) * pencil.gap
                t = dx * np.cos(mid) + dy * np.sin(mid)
            else:
                t = along
            first, count, tmin = table[row, 0].astype(np.int64), table[row, 1].astype(np.int64), table[row, 2]
            j0 = np.floor((t - tmin) / stride).astype(np.int64)
            for back in range(3):
                j = j0 - back
                start = tmin + j * stride
                hit = in_rows & (j >= 0) & (j < count) & (t >= start) & (t < start + w)
                pixel_parts.append(ids[hit])
                patch_parts.append(first[hit] + j[hit])

        return np.concatenate(pixel_parts), np.concatenate(patch_parts)

    def candidate_patches(self, r: EpipolarPatch, pg: PairGeometry, support) -> CandidateSet:
        """
        Slides candidates of three widths along the support strip bounded by
        the lines corresponding to the bounding lines of `r`.
        """
        rc = self.run_config
        lo_line, hi_line, mid_line = (GeometryService.corresponding_line(pg, line) for line in r.lines)
        frame = PencilFrame.for_image(pg.e_sup, support.width, support.height)
        extent = image_extent(support.width, support.height)
        nominal = rc.target_height

        strips = []  # (corners builder, tmin, tmax, strip height)
        if frame.finite:
            exclusion = rc.exclusion_factor * rc.target_height
            a_lo, a_hi, a_mid = (math.atan2(l[0], -l[1]) % math.pi for l in (lo_line, hi_line, mid_line))
            width = (a_hi - a_lo) % math.pi
            if (a_mid - a_lo) % math.pi <= width:
                base, span = a_lo, width
            else:
                base, span = a_hi, math.pi - width
            if span > 1e-12:
                for lo in (base, base + math.pi):
                    hi = lo + span
                    extent_range = frame.strip_range(lo, hi, extent, exclusion)
                    if extent_range is None:
                        continue
                    tmin, tmax = extent_range
                    height = frame.strip_height(lo, hi, (tmin + tmax) / 2.0)
                    strips.append((partial(frame.corners, lo, hi), tmin, tmax, height))
        else:
            sides = []
            for line in (lo_line, hi_line):
                sign = 1.0 if line[:2] @ frame.normal >= 0 else -1.0
                sides.append((-line[2] * sign, line))
            (lo, lo_l), (hi, hi_l) = sorted(sides, key=lambda item: item[0])
            if hi - lo > 1e-12:
                extent_range = frame.strip_range(lo, hi, extent)
                if extent_range is not None:
                    tmin, tmax = extent_range
                    build = partial(self._line_corners, frame, lo_l, hi_l)
                    strips.append((build, tmin, tmax, hi - lo))

        corners, names = [], []
        scale = 1.0
        for build, tmin, tmax, height in strips:
            scale = float(np.clip(height / r.row_height, 0.25, 4.0)) if r.row_height > 0 else 1.0
            length = tmax - tmin
            for factor in rc.candidate_widths:
                size = factor * nominal * scale
                stride = size / 3.0
                count = max(1, int(math.ceil(length / stride - 1e-9)))
                t0 = tmin + np.arange(count) * stride
                corners.append(build(t0, t0 + size))
                names.extend([width_class_name(factor)] * count)

        stacked = np.concatenate(corners) if corners else np.zeros((0, 4, 2))
        stacked = self.orient_like(stacked, lo_line, r.corners)
        return CandidateSet(reference_patch=r, support_id=pg.support_id, corners=stacked,
                            width_classes=names, scale=scale)

    @staticmethod
    def orient_like(corners: np.ndarray, lo_line: np.ndarray, reference: np.ndarray) -> np.ndarray:
        """
        Reorders candidate corners so that c0 and c1 lie on `lo_line` (the line
        corresponding to the reference's c0-c1 side) and the quad winds like
        the reference. The warp then samples both patches in the same frame.
        """
        if len(corners) == 0:
            return corners
        on_lo = np.abs(corners[:, 0] @ lo_line[:2] + lo_line[2])
        on_hi = np.abs(corners[:, 3] @ lo_line[:2] + lo_line[2])
        swapped = on_hi < on_lo
        corners = np.where(swapped[:, None, None], corners[:, [3, 2, 1, 0]], corners)

        def winding(quads):
            u, v = quads[..., 1, :] - quads[..., 0, :], quads[..., 3, :] - quads[..., 0, :]
            return np.sign(u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0])

        flipped = winding(corners) != winding(np.asarray(reference, dtype=np.float64))
        return np.where(flipped[:, None, None], corners[:, [1, 0, 3, 2]], corners)

    @staticmethod
    def _line_corners(frame: PencilFrame, lo_line, hi_line, t0, t1) -> np.ndarray:
        """Corners exactly on the two lines at along-coordinates t0 and t1."""
        def on_line(line, t):
            a, b, c = line
            system = np.array([[a, b], frame.direction])
            rhs = np.stack([np.full_like(t, -c), t], axis=1)
            return np.linalg.solve(system, rhs.T).T
        return np.stack([on_line(lo_line, t0), on_line(lo_line, t1), on_line(hi_line, t1), on_line(hi_line, t0)], axis=1)

    @staticmethod
    def warp_patches(pixels: np.ndarray, corners: np.ndarray, out_w: int, out_h: int):
        """
        Resamples quadrilaterals onto out_h x out_w grids through the bilinear
        map of their corners. Returns (samples, valid), where `valid` is False
        for samples that fell outside the image and were edge-clamped.
        """
        corners = np.asarray(corners, dtype=np.float64).reshape(-1, 4, 2)
        height, width = pixels.shape[:2]
        channels = pixels.shape[2:]
        count = len(corners)
        samples = np.zeros((count, out_h, out_w) + channels, dtype=np.float32)
        valid = np.zeros((count, out_h, out_w), dtype=bool)
        if count == 0:
            return samples, valid

        u = (np.arange(out_w) + 0.5) / out_w
        v = (np.arange(out_h) + 0.5) / out_h
        U, V = np.meshgrid(u, v)
        U, V = U[None, :, :, None], V[None, :, :, None]
        source = np.ascontiguousarray(pixels, dtype=np.float32)

        for begin in range(0, count, WARP_CHUNK):
            c = corners[begin:begin + WARP_CHUNK, :, None, None, :]
            points = (1.0 - V) * ((1.0 - U) * c[:, 0] + U * c[:, 1]) + V * ((1.0 - U) * c[:, 3] + U * c[:, 2])
            n = len(points)
            map_x = points[..., 0].reshape(n * out_h, out_w).astype(np.float32)
            map_y = points[..., 1].reshape(n * out_h, out_w).astype(np.float32)
            warped = cv2.remap(source, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
            samples[begin:begin + n] = warped.reshape((n, out_h, out_w) + channels)
            valid[begin:begin + n] = (
                (points[..., 0] >= -0.5) & (points[..., 0] <= width - 0.5)
                & (points[..., 1] >= -0.5) & (points[..., 1] <= height - 0.5)
            )
        return samples, valid

    def warp_patch(self, image, p: EpipolarPatch, out_w: int | None = None, out_h: int | None = None):
        """
        Single-patch form of `warp_patches` on an `Image`.

        Raises:
            DegeneratePatchError: If the quadrilateral area is below 1 px^2.
        """
        out_w = out_w or self.run_config.canonical_size
        out_h = out_h or self.run_config.canonical_size
        if polygon_area(np.asarray(p.corners, dtype=np.float64)) < 1.0:
            raise DegeneratePatchError(f"Patch of image '{p.owner_id}' has (near) zero area.")
        samples, valid = self.warp_patches(image.as_float(), p.corners[None], out_w, out_h)
        return samples[0], valid[0]
