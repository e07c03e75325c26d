"""Synthetic flat-ground BEV world: scene sampling, BEV rasterization and
front-view rendering through a ground-plane homography.

Coordinate conventions
----------------------
BEV metric frame: ``x`` points forward (away from the camera), ``y`` points to
the right. The BEV window covers ``x in [0, extent]`` and
``y in [-extent/2, extent/2]``. Raster row 0 is the far edge, column 0 the
left edge, so a raster looks like a top-down map with the ego car at the
bottom.

The camera sits ``camera.offset`` meters behind the near edge of the window on
the lateral center line, ``camera.height`` meters above the ground, pitched
down by ``camera.pitch`` radians.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

BACKGROUND, ROAD, VEHICLE = 0, 1, 2
MULTI_CLASS_SET = ("background", "road", "vehicle")
SINGLE_CLASS_SET = ("background", "foreground")

# Base colors (RGB in [0, 1]). Kept far apart so color alone separates classes.
SKY_COLOR = (0.62, 0.78, 0.95)
GROUND_COLOR = (0.36, 0.52, 0.28)
ROAD_COLOR = (0.42, 0.42, 0.46)
VEHICLE_COLOR = (0.86, 0.14, 0.12)

SCENE_SCHEMA_VERSION = 1


class DegenerateCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. Intrinsics are in pixels at ``ref_width x ref_height``
    and are rescaled when rendering at another resolution."""

    focal: float = 128.0
    cx: float = 128.0
    cy: float = 128.0
    ref_width: int = 256
    ref_height: int = 256
    height: float = 9.0
    pitch: float = 0.62
    offset: float = 6.0

    def scaled(self, height: int, width: int) -> tuple[float, float, float, float]:
        """Return ``(fx, fy, cx, cy)`` for an image of the given size."""
        sx = width / self.ref_width
        sy = height / self.ref_height
        return self.focal * sx, self.focal * sy, self.cx * sx, self.cy * sy

    def horizon_row(self, height: int, width: int) -> float:
        _, fy, _, cy = self.scaled(height, width)
        return cy - fy * math.tan(self.pitch)


@dataclass(frozen=True)
class Vehicle:
    x: float
    y: float
    length: float
    width: float
    heading: float

    def corners(self) -> np.ndarray:
        """(4, 2) corners in BEV meters, counter-clockwise."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    extent: float
    road_segments: tuple[tuple[tuple[float, float], ...], ...]
    vehicles: tuple[Vehicle, ...]
    camera: Camera = field(default_factory=Camera)

    def to_json(self) -> str:
        doc = {
            "schema_version": SCENE_SCHEMA_VERSION,
            "seed": self.seed,
            "extent": self.extent,
            "camera": asdict(self.camera),
            "road_segments": [[list(p) for p in poly] for poly in self.road_segments],
            "vehicles": [asdict(v) for v in self.vehicles],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        doc = json.loads(text)
        if doc.get("schema_version") != SCENE_SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema version {doc.get('schema_version')!r}")
        return cls(
            seed=int(doc["seed"]),
            extent=float(doc["extent"]),
            road_segments=tuple(
                tuple((float(x), float(y)) for x, y in poly) for poly in doc["road_segments"]
            ),
            vehicles=tuple(Vehicle(**v) for v in doc["vehicles"]),
            camera=Camera(**doc["camera"]),
        )


@dataclass
class LayoutRaster:
    """Class-id grid in BEV.

    ``coverage`` holds the pre-priority per-class masks (``"road"``,
    ``"vehicle"``) when the raster came from a scene, so the road task can be
    supervised with road cells hidden under vehicles.
    """

    classes: np.ndarray
    class_set: tuple[str, ...] = MULTI_CLASS_SET
    resolution: float = 0.25
    coverage: Optional[dict[str, np.ndarray]] = None

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.classes.ndim != 2:
            raise ValueError(f"classes must be 2-D, got shape {self.classes.shape}")
        if self.classes.size and (self.classes.min() < 0 or self.classes.max() >= len(self.class_set)):
            raise ValueError("class id outside class_set")

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape


@dataclass
class FrontViewImage:
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# --------------------------------------------------------------------------- #
# point-in-shape tests (vectorized, exact for the point samples they receive)
# --------------------------------------------------------------------------- #

def points_in_polygon(px: np.ndarray, py: np.ndarray, polygon) -> np.ndarray:
    """Even-odd rule. ``px``/``py`` broadcast together."""
    poly = np.asarray(polygon, dtype=np.float64)
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_cross)
    return inside


def points_in_vehicle(px: np.ndarray, py: np.ndarray, v: Vehicle) -> np.ndarray:
    c, s = math.cos(v.heading), math.sin(v.heading)
    dx, dy = px - v.x, py - v.y
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return (np.abs(along) <= v.length / 2) & (np.abs(across) <= v.width / 2)


def _segments_intersect(a, b, c, d) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def is_simple_polygon(polygon) -> bool:
    """True when no two non-adjacent edges properly cross."""
    pts = [tuple(p) for p in polygon]
    n = len(pts)
    if n < 3:
        return False
    edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def vehicle_inside_extent(v: Vehicle, extent: float) -> bool:
    c = v.corners()
    half = extent / 2
    return bool(
        (c[:, 0] >= 0).all() and (c[:, 0] <= extent).all()
        and (c[:, 1] >= -half).all() and (c[:, 1] <= half).all()
    )


# --------------------------------------------------------------------------- #
# scene sampling
# --------------------------------------------------------------------------- #

def _road_strip(extent: float, angle: float, width: float, anchor: float):
    """A straight road band crossing the whole window, as a quad that overhangs
    the window so the front view shows it continuing."""
    reach = 2.5 * extent
    # direction along the road and its normal, in (x, y)
    d = np.array([math.cos(angle), math.sin(angle)])
    nrm = np.array([-d[1], d[0]])
    center = np.array([extent / 2, 0.0]) + anchor * nrm
    w = width / 2
    quad = [
        center - reach * d - w * nrm,
        center + reach * d - w * nrm,
        center + reach * d + w * nrm,
        center - reach * d + w * nrm,
    ]
    return tuple((round(float(p[0]), 6), round(float(p[1]), 6)) for p in quad)


def _sample_vehicle_on_road(rng, extent, road_angle, road_anchor, road_width, tries=200):
    d = np.array([math.cos(road_angle), math.sin(road_angle)])
    nrm = np.array([-d[1], d[0]])
    center = np.array([extent / 2, 0.0]) + road_anchor * nrm
    for _ in range(tries):
        length = float(rng.uniform(4.0, 4.8))
        width = float(rng.uniform(1.8, 2.1))
        t = float(rng.uniform(-extent / 2, extent / 2))
        lateral = float(rng.uniform(-road_width / 4, road_width / 4))
        pos = center + t * d + lateral * nrm
        heading = road_angle + float(rng.normal(0.0, 0.08))
        v = Vehicle(round(float(pos[0]), 6), round(float(pos[1]), 6),
                    round(length, 6), round(width, 6), round(heading, 6))
        if vehicle_inside_extent(v, extent):
            return v
    return None


def _sample_free_vehicle(rng, extent, tries=200):
    half = extent / 2
    for _ in range(tries):
        v = Vehicle(
            round(float(rng.uniform(1.0, extent - 1.0)), 6),
            round(float(rng.uniform(-half + 1.0, half - 1.0)), 6),
            round(float(rng.uniform(4.0, 4.8)), 6),
            round(float(rng.uniform(1.8, 2.1)), 6),
            round(float(rng.uniform(-math.pi, math.pi)), 6),
        )
        if vehicle_inside_extent(v, extent):
            return v
    return None


def _overlaps_any(v: Vehicle, others, extent) -> bool:
    # sample-based overlap test on a fine grid around the candidate
    c = v.corners()
    xs = np.linspace(c[:, 0].min(), c[:, 0].max(), 24)
    ys = np.linspace(c[:, 1].min(), c[:, 1].max(), 24)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    mine = points_in_vehicle(gx, gy, v)
    return any((mine & points_in_vehicle(gx, gy, o)).any() for o in others)


def generate_scene(seed: int, difficulty: str = "standard", extent: float = 16.0,
                   camera: Optional[Camera] = None) -> SceneSpec:
    """Sample a scene. ``easy``: one straight road, at most two vehicles.
    ``standard``: one to three roads, zero to six vehicles."""
    if difficulty not in ("easy", "standard"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    roads = []
    road_params = []
    if difficulty == "easy":
        n_roads = 1
        n_vehicles = int(rng.integers(1, 3))
    else:
        n_roads = int(rng.integers(1, 4))
        n_vehicles = int(rng.integers(0, 7))
    for k in range(n_roads):
        if k == 0:
            angle = float(rng.normal(0.0, 0.05 if difficulty == "easy" else 0.15))
        elif k == 1:
            angle = math.pi / 2 + float(rng.normal(0.0, 0.2))
        else:
            angle = float(rng.uniform(0.3, 1.2)) * (1 if rng.random() < 0.5 else -1)
        width = float(rng.uniform(5.0, 8.0))
        anchor = float(rng.uniform(-2.5, 2.5))
        roads.append(_road_strip(extent, angle, width, anchor))
        road_params.append((angle, anchor, width))

    vehicles: list[Vehicle] = []
    for _ in range(n_vehicles):
        for _attempt in range(20):
            if difficulty == "standard" and rng.random() < 0.2:
                v = _sample_free_vehicle(rng, extent)
            else:
                angle, anchor, width = road_params[int(rng.integers(len(road_params)))]
                v = _sample_vehicle_on_road(rng, extent, angle, anchor, width)
            if v is not None and not _overlaps_any(v, vehicles, extent):
                vehicles.append(v)
                break
    return SceneSpec(seed=int(seed), extent=float(extent), road_segments=tuple(roads),
                     vehicles=tuple(vehicles), camera=camera or Camera())


# --------------------------------------------------------------------------- #
# BEV rasterization
# --------------------------------------------------------------------------- #

def cell_centers(extent: float, grid_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Metric (x, y) of every raster cell center, each shaped (grid, grid)."""
    res = extent / grid_size
    rows = np.arange(grid_size)
    cols = np.arange(grid_size)
    x = extent - (rows + 0.5) * res
    y = -extent / 2 + (cols + 0.5) * res
    return np.meshgrid(x, y, indexing="ij")


def metric_to_cell(x: np.ndarray, y: np.ndarray, extent: float, grid_size: int):
    """Integer (row, col) of the cell containing each metric point; points
    outside the window get -1."""
    res = extent / grid_size
    row = np.floor((extent - x) / res).astype(np.int64)
    col = np.floor((y + extent / 2) / res).astype(np.int64)
    bad = (row < 0) | (row >= grid_size) | (col < 0) | (col >= grid_size)
    row[bad] = -1
    col[bad] = -1
    return row, col


def rasterize_bev(scene: SceneSpec, grid_size: int) -> LayoutRaster:
    if grid_size < 8:
        raise ValueError("grid_size must be >= 8")
    gx, gy = cell_centers(scene.extent, grid_size)
    road = np.zeros(gx.shape, dtype=bool)
    for poly in scene.road_segments:
        road |= points_in_polygon(gx, gy, poly)
    vehicle = np.zeros(gx.shape, dtype=bool)
    for v in scene.vehicles:
        vehicle |= points_in_vehicle(gx, gy, v)
    classes = np.full(gx.shape, BACKGROUND, dtype=np.int64)
    classes[road] = ROAD
    classes[vehicle] = VEHICLE
    return LayoutRaster(classes, MULTI_CLASS_SET, scene.extent / grid_size,
                        coverage={"road": road, "vehicle": vehicle})


# --------------------------------------------------------------------------- #
# front-view rendering
# --------------------------------------------------------------------------- #

def check_camera(camera: Camera, height: int, width: int) -> float:
    horizon = camera.horizon_row(height, width)
    if not (0.0 <= horizon < height - 1) or not (0.0 < camera.pitch < math.pi / 2):
        raise DegenerateCameraError(
            f"degenerate camera: horizon row {horizon:.2f} outside image of height {height}"
        )
    return horizon


def ground_homography(camera: Camera, height: int, width: int) -> np.ndarray:
    """3x3 matrix mapping homogeneous ground points (x, y, 1) in the BEV frame
    to homogeneous image points (u, v, 1)."""
    fx, fy, cx, cy = camera.scaled(height, width)
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    c, s = math.cos(camera.pitch), math.sin(camera.pitch)
    # camera frame: right, down, forward. Ground point at forward distance
    # d = x + offset, lateral y, depth below camera = height.
    #   x_c = y
    #   y_c = h*c - d*s
    #   z_c = d*c + h*s
    h, off = camera.height, camera.offset
    M = np.array([
        [0.0, 1.0, 0.0],
        [-s, 0.0, h * c - off * s],
        [c, 0.0, off * c + h * s],
    ])
    return K @ M


def project_ground(camera: Camera, height: int, width: int, x, y):
    """Project ground points to pixel coordinates ``(u, v)``."""
    H = ground_homography(camera, height, width)
    pts = np.stack([np.asarray(x, float), np.asarray(y, float), np.ones_like(np.asarray(x, float))])
    uvw = np.tensordot(H, pts, axes=1)
    return uvw[0] / uvw[2], uvw[1] / uvw[2]


def pixel_ground_points(camera: Camera, height: int, width: int):
    """Ground point hit by each pixel center plus a below-horizon mask."""
    horizon = check_camera(camera, height, width)
    Hinv = np.linalg.inv(ground_homography(camera, height, width))
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    pts = np.stack([u, v, np.ones_like(u)])
    g = np.tensordot(Hinv, pts, axes=1)
    below = v > horizon + 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        gx = np.where(below, g[0] / g[2], np.nan)
        gy = np.where(below, g[1] / g[2], np.nan)
    return gx, gy, below


def front_view_masks(scene: SceneSpec, height: int, width: int):
    """Per-pixel (road, vehicle, ground) masks of the noise-free render."""
    gx, gy, below = pixel_ground_points(scene.camera, height, width)
    gx0 = np.where(below, gx, 0.0)
    gy0 = np.where(below, gy, 0.0)
    road = np.zeros(below.shape, dtype=bool)
    for poly in scene.road_segments:
        road |= points_in_polygon(gx0, gy0, poly)
    vehicle = np.zeros(below.shape, dtype=bool)
    for v in scene.vehicles:
        vehicle |= points_in_vehicle(gx0, gy0, v)
    return road & below, vehicle & below, below


def render_front_view(scene: SceneSpec, height: int, width: int, noise_std: float = 0.0) -> FrontViewImage:
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    road, vehicle, ground = front_view_masks(scene, height, width)
    img = np.empty((height, width, 3), dtype=np.float64)
    img[...] = SKY_COLOR
    img[ground] = GROUND_COLOR
    img[road] = ROAD_COLOR
    img[vehicle] = VEHICLE_COLOR
    if noise_std > 0:
        rng = np.random.default_rng([scene.seed, 0x5EED])
        img += rng.normal(0.0, noise_std, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return FrontViewImage(img.astype(np.float32))


def color_distance_mask(image: FrontViewImage, color, tol: float = 1e-6) -> np.ndarray:
    return (np.abs(image.pixels - np.asarray(color, dtype=np.float32)) <= tol).all(axis=-1)
