"""Vector-to-raster label generation: 3-class rasters from buildings and roads.

Classes: 0 = background, 1 = building, 2 = road.  Contested pixels go to
the building class.  Fill conventions are pinned so that a brute-force
per-pixel oracle agrees cell-for-cell:

* polygons: a pixel is set iff its CENTER is inside under the even-odd
  rule; a center exactly on an edge counts via the half-open crossing
  test, which for axis-aligned boxes includes top and left edges;
* road bands: a pixel is set iff the distance from its center to the
  centerline is <= width/2 (round joins and caps follow from the
  definition).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, FormatViolation, IoFailure
from .geo import RasterGeoref, project_lonlat_arrays, write_georef, read_georef
from .osm import ROAD_CATEGORIES, BuildingPolygon, RoadCenterline

LABEL_BACKGROUND = 0
LABEL_BUILDING = 1
LABEL_ROAD = 2

OVERLAY_BUILDING_RGBA = (255, 0, 0, 128)
OVERLAY_ROAD_RGBA = (0, 0, 255, 128)

#: Average road width per category, meters.  Chosen to give roughly 100 px
#: of road width at ~10 cm GSD for the mid categories; override via config.
DEFAULT_ROAD_WIDTHS_M = {
    "motorway": 22.0,
    "trunk": 18.0,
    "primary": 14.0,
    "secondary": 11.0,
    "tertiary": 9.0,
    "residential": 7.0,
    "service": 4.5,
    "other": 6.0,
}


@dataclass(frozen=True)
class RoadWidthTable:
    widths_m: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_ROAD_WIDTHS_M))

    def __post_init__(self) -> None:
        missing = set(ROAD_CATEGORIES) - set(self.widths_m)
        if missing:
            raise ValueError(f"road width table missing categories: {sorted(missing)}")
        if any(w <= 0 for w in self.widths_m.values()):
            raise ValueError("road widths must be positive")

    @classmethod
    def from_json(cls, path: str | Path) -> "RoadWidthTable":
        return cls(widths_m=dict(json.loads(Path(path).read_text())))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.widths_m, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class NoiseParams:
    """Label noise model: a rigid misregistration shift plus per-road width error.

    The width error is drawn uniformly from [-width_jitter_px, +width_jitter_px]
    per road (mean 0; mean absolute error = width_jitter_px / 2).  All draws
    are reproducible from the seed.
    """

    shift_px: tuple[float, float] = (0.0, 0.0)
    width_jitter_px: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width_jitter_px < 0:
            raise ValueError("width_jitter_px must be >= 0")

    @classmethod
    def from_json(cls, path: str | Path) -> "NoiseParams":
        raw = json.loads(Path(path).read_text())
        return cls(
            shift_px=tuple(raw.get("shift_px", (0.0, 0.0))),
            width_jitter_px=raw.get("width_jitter_px", 0.0),
            seed=raw.get("seed", 0),
        )

    def to_json(self, path: str | Path) -> None:
        payload = {
            "shift_px": list(self.shift_px),
            "width_jitter_px": self.width_jitter_px,
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass
class LabelRaster:
    classes: np.ndarray  # (H, W) uint8 in {0, 1, 2}
    georef: RasterGeoref

    def __post_init__(self) -> None:
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.shape != (self.georef.height_px, self.georef.width_px):
            raise DimensionMismatch(
                f"classes shape {self.classes.shape} != georef "
                f"({self.georef.height_px}, {self.georef.width_px})"
            )
        if self.classes.max(initial=0) > LABEL_ROAD:
            raise ValueError("label values must be in {0, 1, 2}")


# ---------------------------------------------------------------------------
# pixel-space mask primitives


def fill_polygon_mask(
    ring_px: np.ndarray,
    shape: tuple[int, int],
    diagnostics: list[str] | None = None,
) -> np.ndarray:
    """Scanline even-odd fill of a closed ring given in pixel coordinates.

    `ring_px` is (N, 2) with columns (x, y) and first row == last row.
    A zero-area ring yields an empty mask plus a diagnostic.
    """
    ring = np.asarray(ring_px, dtype=np.float64)
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    x1, y1 = ring[:-1, 0], ring[:-1, 1]
    x2, y2 = ring[1:, 0], ring[1:, 1]
    area2 = np.sum(x1 * y2 - x2 * y1)
    if area2 == 0.0:
        if diagnostics is not None:
            diagnostics.append("degenerate polygon (zero area), emitted empty mask")
        return mask

    y_lo = max(0, int(np.ceil(ring[:, 1].min())))
    y_hi = min(h - 1, int(np.floor(ring[:, 1].max())))
    for y in range(y_lo, y_hi + 1):
        crossing = (y1 > y) != (y2 > y)
        if not crossing.any():
            continue
        # same expression as the point-in-polygon crossing test, so pixel
        # centers exactly on an edge resolve identically
        xi = x1[crossing] + (y - y1[crossing]) * (x2[crossing] - x1[crossing]) / (y2[crossing] - y1[crossing])
        xi.sort()
        for a, b in zip(xi[0::2], xi[1::2]):
            lo = max(0, int(np.ceil(a)))
            hi = min(w - 1, int(np.ceil(b)) - 1)
            if lo <= hi:
                mask[y, lo : hi + 1] = True
    return mask


def polyline_distance_sq(points_px: np.ndarray, shape: tuple[int, int], reach_px: float) -> np.ndarray:
    """Squared distance from each pixel center to a polyline, computed only
    within `reach_px` of each segment's bounding box (inf elsewhere)."""
    pts = np.asarray(points_px, dtype=np.float64)
    h, w = shape
    d2 = np.full(shape, np.inf)
    for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
        if ax == bx and ay == by:
            continue
        x_lo = max(0, int(np.ceil(min(ax, bx) - reach_px)))
        x_hi = min(w - 1, int(np.floor(max(ax, bx) + reach_px)))
        y_lo = max(0, int(np.ceil(min(ay, by) - reach_px)))
        y_hi = min(h - 1, int(np.floor(max(ay, by) + reach_px)))
        if x_lo > x_hi or y_lo > y_hi:
            continue
        ys, xs = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
        abx, aby = bx - ax, by - ay
        t = ((xs - ax) * abx + (ys - ay) * aby) / (abx * abx + aby * aby)
        t = np.clip(t, 0.0, 1.0)
        dx = xs - (ax + t * abx)
        dy = ys - (ay + t * aby)
        seg = dx * dx + dy * dy
        region = d2[y_lo : y_hi + 1, x_lo : x_hi + 1]
        np.minimum(region, seg, out=region)
    return d2


def buffer_polyline_mask(
    points_px: np.ndarray,
    radius_px: float,
    shape: tuple[int, int],
    diagnostics: list[str] | None = None,
) -> np.ndarray:
    """Pixels whose center lies within radius_px of the polyline."""
    pts = np.asarray(points_px, dtype=np.float64)
    nonzero = any(
        (a != c or b != d) for (a, b), (c, d) in zip(pts[:-1], pts[1:])
    )
    if not nonzero:
        if diagnostics is not None:
            diagnostics.append("zero-length centerline segment set, emitted empty mask")
        return np.zeros(shape, dtype=bool)
    if radius_px <= 0:
        return np.zeros(shape, dtype=bool)
    d2 = polyline_distance_sq(pts, shape, radius_px + 1.0)
    return d2 <= radius_px * radius_px


# ---------------------------------------------------------------------------
# geometry-level operations


def _polygon_pixels(poly: BuildingPolygon, g: RasterGeoref) -> np.ndarray:
    lons = np.array([p.lon for p in poly.ring])
    lats = np.array([p.lat for p in poly.ring])
    xs, ys = project_lonlat_arrays(lons, lats, g)
    return np.column_stack([xs, ys])


def _road_pixels(road: RoadCenterline, g: RasterGeoref) -> np.ndarray:
    lons = np.array([p.lon for p in road.points])
    lats = np.array([p.lat for p in road.points])
    xs, ys = project_lonlat_arrays(lons, lats, g)
    return np.column_stack([xs, ys])


def rasterize_polygon(
    poly: BuildingPolygon,
    g: RasterGeoref,
    diagnostics: list[str] | None = None,
) -> np.ndarray:
    """Binary mask of a building polygon on the raster grid."""
    return fill_polygon_mask(_polygon_pixels(poly, g), (g.height_px, g.width_px), diagnostics)


def road_radius_px(road: RoadCenterline, widths: RoadWidthTable, g: RasterGeoref) -> float:
    return widths.widths_m[road.category] / g.gsd_m / 2.0


def buffer_centerline(
    road: RoadCenterline,
    widths: RoadWidthTable,
    g: RasterGeoref,
    diagnostics: list[str] | None = None,
) -> np.ndarray:
    """Binary mask of a road band: category width buffered around the centerline."""
    return buffer_polyline_mask(
        _road_pixels(road, g),
        road_radius_px(road, widths, g),
        (g.height_px, g.width_px),
        diagnostics,
    )


def compose_labels(
    building_masks: list[np.ndarray],
    road_masks: list[np.ndarray],
    g: RasterGeoref,
) -> LabelRaster:
    """Merge binary masks into the 3-class raster; buildings win collisions."""
    shape = (g.height_px, g.width_px)
    for m in list(building_masks) + list(road_masks):
        if m.shape != shape:
            raise DimensionMismatch(f"mask shape {m.shape} != raster {shape}")
    classes = np.zeros(shape, dtype=np.uint8)
    for m in road_masks:
        classes[m] = LABEL_ROAD
    for m in building_masks:
        classes[m] = LABEL_BUILDING
    return LabelRaster(classes, g)


def rasterize_scene(
    buildings: list[BuildingPolygon],
    roads: list[RoadCenterline],
    widths: RoadWidthTable,
    g: RasterGeoref,
    diagnostics: list[str] | None = None,
) -> LabelRaster:
    """Clean (unperturbed) label raster for a set of extracted entities."""
    bmasks = [rasterize_polygon(b, g, diagnostics) for b in buildings]
    rmasks = [buffer_centerline(r, widths, g, diagnostics) for r in roads]
    return compose_labels(bmasks, rmasks, g)


def perturb_labels(
    buildings: list[BuildingPolygon],
    roads: list[RoadCenterline],
    widths: RoadWidthTable,
    noise: NoiseParams,
    g: RasterGeoref,
    diagnostics: list[str] | None = None,
) -> LabelRaster:
    """Label raster with the misregistration/width noise model applied.

    The shift is rounded to whole pixels and applied to the projected
    geometry before rasterization; each road's width receives one uniform
    draw, consumed in input order.  Identical inputs and seed give a
    bitwise identical raster.
    """
    rng = np.random.default_rng(noise.seed)
    dx = float(round(noise.shift_px[0]))
    dy = float(round(noise.shift_px[1]))
    shift = np.array([dx, dy])
    shape = (g.height_px, g.width_px)

    bmasks = [
        fill_polygon_mask(_polygon_pixels(b, g) + shift, shape, diagnostics) for b in buildings
    ]
    rmasks = []
    for road in roads:
        width_px = widths.widths_m[road.category] / g.gsd_m
        draw = rng.uniform(-noise.width_jitter_px, noise.width_jitter_px)
        radius = max(width_px + draw, 0.0) / 2.0
        rmasks.append(buffer_polyline_mask(_road_pixels(road, g) + shift, radius, shape, diagnostics))
    return compose_labels(bmasks, rmasks, g)


@dataclass(frozen=True)
class LabelStats:
    counts: tuple[int, int, int]
    fractions: tuple[float, float, float]


def label_stats(lr: LabelRaster) -> LabelStats:
    counts = np.bincount(lr.classes.ravel(), minlength=3)
    total = lr.classes.size
    return LabelStats(tuple(int(c) for c in counts), tuple(float(c) / total for c in counts))


# ---------------------------------------------------------------------------
# persistence and overlays


def save_label_png(lr: LabelRaster, path: str | Path) -> None:
    """Single-channel 8-bit PNG with raw class values, plus georef sidecar."""
    path = Path(path)
    try:
        Image.fromarray(lr.classes, mode="L").save(path)
    except OSError as exc:
        raise IoFailure(f"cannot write label raster {path}") from exc
    write_georef(lr.georef, path)


def load_label_png(path: str | Path) -> LabelRaster:
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise IoFailure(f"label raster {path} not found") from exc
    except OSError as exc:
        raise FormatViolation(f"label raster {path} is not a readable PNG") from exc
    if arr.max(initial=0) > LABEL_ROAD:
        raise FormatViolation(f"label raster {path} contains values outside {{0,1,2}}")
    return LabelRaster(arr, read_georef(path))


def render_label_overlay(classes: np.ndarray) -> np.ndarray:
    """RGBA overlay: building red, road blue, background transparent."""
    h, w = classes.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    rgba[classes == LABEL_BUILDING] = OVERLAY_BUILDING_RGBA
    rgba[classes == LABEL_ROAD] = OVERLAY_ROAD_RGBA
    return rgba


def render_probability_overlay(prob: np.ndarray) -> np.ndarray:
    """Red (high) to blue (low) ramp over a probability map in [0, 1]."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    rgba = np.zeros(p.shape + (4,), dtype=np.uint8)
    rgba[..., 0] = np.round(255.0 * p)
    rgba[..., 2] = np.round(255.0 * (1.0 - p))
    rgba[..., 3] = 255
    return rgba
