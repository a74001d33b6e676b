"""Procedural desk-scale city scenes: co-registered imagery plus clean geometry.

A scene is an axis-aligned road grid with jitter and rectangular buildings
placed in the blocks between roads.  The image is rendered from the exact
same geometry that is emitted as vector data, so clean labels derived from
that geometry are pixel-exact against the rendering.

Two fixed render styles (A and B) differ in palette contrast and texture
noise; they stand in for two image sources of the same world, giving the
transfer-learning experiments a controlled domain gap.  Style C is a third
palette used for generic pre-training baselines.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .dataset import ImageRaster
from .errors import PlacementOverflow
from .geo import GeoPoint, RasterGeoref, unproject_pixel_arrays
from .labelgen import (
    LABEL_BUILDING,
    LABEL_ROAD,
    RoadWidthTable,
    buffer_centerline,
    rasterize_polygon,
)
from .osm import BuildingPolygon, RoadCenterline


@dataclass(frozen=True)
class RenderStyle:
    ground_rgb: tuple[int, int, int]
    road_rgb: tuple[int, int, int]
    #: roof material palette: each building draws one base color from here
    roof_materials: tuple[tuple[int, int, int], ...]
    #: ground feature palette: park/dirt/water patches painted on background
    ground_features: tuple[tuple[int, int, int], ...]
    texture_sigma: float
    shadow_offset_px: tuple[int, int]
    shadow_strength: float
    #: appearance diversity: per-object color jitter and a smooth
    #: illumination field; these make small tile budgets genuinely
    #: data-limited instead of trivially sufficient
    roof_jitter: float = 0.0
    road_jitter: float = 0.0
    illumination_amp: float = 0.0
    district_tint: float = 0.0

    @property
    def roof_rgb(self) -> tuple[int, int, int]:
        return self.roof_materials[0]


#: Style A: green ground, dark roads, warm roofs.  Style B inverts the
#: road/ground contrast and uses cool, dark roofs under stronger noise,
#: so a model trained on A degrades visibly on B before fine-tuning.
STYLES: dict[str, RenderStyle] = {
    "A": RenderStyle(
        ground_rgb=(95, 130, 80),
        road_rgb=(70, 70, 75),
        roof_materials=((175, 80, 55), (92, 82, 78), (205, 185, 155), (125, 135, 62), (150, 150, 162), (68, 94, 116), (196, 120, 84), (58, 60, 66)),
        ground_features=((58, 108, 52), (142, 122, 88), (52, 74, 108)),
        texture_sigma=10.0,
        shadow_offset_px=(2, 2),
        shadow_strength=0.35,
        roof_jitter=28.0,
        road_jitter=26.0,
        illumination_amp=0.28,
        district_tint=20.0,
    ),
    "B": RenderStyle(
        ground_rgb=(152, 140, 122),
        road_rgb=(94, 78, 62),
        roof_materials=((70, 78, 104), (150, 66, 54), (188, 180, 168), (96, 104, 90), (128, 122, 148), (184, 148, 86), (62, 104, 94), (204, 196, 128)),
        ground_features=((118, 128, 102), (174, 158, 122), (78, 92, 108)),
        texture_sigma=12.0,
        shadow_offset_px=(-2, 1),
        shadow_strength=0.25,
        roof_jitter=26.0,
        road_jitter=22.0,
        illumination_amp=0.24,
        district_tint=16.0,
    ),
    "C": RenderStyle(
        ground_rgb=(160, 140, 110),
        road_rgb=(105, 100, 95),
        roof_materials=((215, 205, 190), (122, 92, 68), (162, 60, 46), (98, 112, 122), (182, 152, 162), (82, 82, 58), (140, 172, 150), (60, 52, 80)),
        ground_features=((118, 128, 82), (178, 162, 128), (66, 88, 104)),
        texture_sigma=10.0,
        shadow_offset_px=(1, -2),
        shadow_strength=0.30,
        roof_jitter=24.0,
        road_jitter=20.0,
        illumination_amp=0.24,
        district_tint=16.0,
    ),
}

DEFAULT_CATEGORY_MIX = ("residential", "residential", "tertiary", "secondary", "service")


@dataclass(frozen=True)
class SceneParams:
    seed: int = 0
    extent_px: int = 512
    gsd_m: float = 0.5
    building_density: float = 0.14  # target building-area fraction of the scene
    building_size_px: tuple[int, int] = (12, 26)
    road_spacing_px: float = 64.0
    road_jitter_px: float = 6.0
    category_mix: tuple[str, ...] = DEFAULT_CATEGORY_MIX
    style: str = "A"
    origin: tuple[float, float] = (13.0, 52.4)  # lon, lat of pixel (0, 0)

    def __post_init__(self) -> None:
        if not 0.0 <= self.building_density < 1.0:
            raise ValueError("building_density must be in [0, 1)")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")
        if self.building_size_px[0] < 2 or self.building_size_px[1] < self.building_size_px[0]:
            raise ValueError("building size range invalid")


def scene_georef(p: SceneParams) -> RasterGeoref:
    return RasterGeoref(GeoPoint(*p.origin), p.gsd_m, p.extent_px, p.extent_px)


def _grid_positions(rng, extent: float, spacing: float, jitter: float) -> list[float]:
    positions = []
    x = rng.uniform(0.4, 0.8) * spacing
    while x < extent - spacing * 0.25:
        positions.append(x + rng.uniform(-jitter, jitter))
        x += spacing
    return positions


def _pixel_rect_to_polygon(x0, y0, x1, y1, g, source_id) -> BuildingPolygon:
    xs = np.array([x0, x1, x1, x0, x0])
    ys = np.array([y0, y0, y1, y1, y0])
    lons, lats = unproject_pixel_arrays(xs, ys, g)
    ring = tuple(GeoPoint(lon, lat) for lon, lat in zip(lons, lats))
    return BuildingPolygon(ring, source_id)


def _pixel_line_to_road(points_px, category, g, source_id) -> RoadCenterline:
    xs = np.array([q[0] for q in points_px])
    ys = np.array([q[1] for q in points_px])
    lons, lats = unproject_pixel_arrays(xs, ys, g)
    return RoadCenterline(tuple(GeoPoint(lon, lat) for lon, lat in zip(lons, lats)), category, source_id)


def generate_scene(
    p: SceneParams,
    widths: RoadWidthTable | None = None,
) -> tuple[ImageRaster, list[BuildingPolygon], list[RoadCenterline]]:
    """Generate a deterministic scene: rendered image plus vector geometry.

    Buildings never overlap road bands; rejection sampling gives each
    building 1000 placement attempts before PlacementOverflow.
    """
    widths = widths or RoadWidthTable()
    style = STYLES[p.style]
    g = scene_georef(p)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(p.seed, 17)))
    extent = float(p.extent_px)

    # road grid in pixel space; endpoints run slightly past the raster so no
    # caps are visible inside
    vertical = _grid_positions(rng, extent, p.road_spacing_px, p.road_jitter_px)
    horizontal = _grid_positions(rng, extent, p.road_spacing_px, p.road_jitter_px)
    road_layout = []
    # category (and so width) varies across the scene, one more large-scale
    # mode a small contiguous tile budget cannot cover
    for x in vertical:
        category = p.category_mix[int(x / extent * len(p.category_mix)) % len(p.category_mix)]
        road_layout.append((((x, -8.0), (x, extent + 7.0)), category, "v", x))
    for y in horizontal:
        category = p.category_mix[int(y / extent * len(p.category_mix)) % len(p.category_mix)]
        road_layout.append((((-8.0, y), (extent + 7.0, y)), category, "h", y))

    # blocked bands around each road (half width + clearance)
    blocked_x, blocked_y = [], []
    for (_, category, axis, pos) in road_layout:
        half = widths.widths_m[category] / p.gsd_m / 2.0 + 2.0
        (blocked_x if axis == "v" else blocked_y).append((pos - half, pos + half))

    def clear(lo, hi, bands):
        return all(hi < b_lo or lo > b_hi for b_lo, b_hi in bands)

    smin, smax = p.building_size_px
    mean_area = ((smin + smax) / 2.0) ** 2
    n_buildings = int(round(p.building_density * extent * extent / mean_area))
    rects: list[tuple[float, float, float, float]] = []
    for _ in range(n_buildings):
        placed = False
        for _attempt in range(1000):
            w = rng.uniform(smin, smax)
            h = rng.uniform(smin, smax)
            x0 = rng.uniform(1.0, extent - w * 1.4 - 1.0)
            y0 = rng.uniform(1.0, extent - h * 1.4 - 1.0)
            # building footprints grow from west to east, a scene-scale
            # structural gradient
            scale = 0.75 + 0.65 * (x0 / extent)
            w_s, h_s = w * scale, h * scale
            x1, y1 = x0 + w_s, y0 + h_s
            if not clear(x0, x1, blocked_x) or not clear(y0, y1, blocked_y):
                continue
            if any(x0 < rx1 + 2 and x1 > rx0 - 2 and y0 < ry1 + 2 and y1 > ry0 - 2
                   for rx0, ry0, rx1, ry1 in rects):
                continue
            rects.append((x0, y0, x1, y1))
            placed = True
            break
        if not placed:
            raise PlacementOverflow(
                f"could not place building {len(rects) + 1}/{n_buildings} in 1000 attempts"
            )

    buildings = [
        _pixel_rect_to_polygon(x0, y0, x1, y1, g, source_id=i + 1)
        for i, (x0, y0, x1, y1) in enumerate(rects)
    ]
    roads = [
        _pixel_line_to_road(line, category, g, source_id=len(buildings) + 1 + i)
        for i, (line, category, _, _) in enumerate(road_layout)
    ]

    # render from the emitted geometry so labels derived from it are exact
    building_masks = [rasterize_polygon(b, g) for b in buildings]
    building_mask = np.zeros((p.extent_px, p.extent_px), dtype=bool)
    for m in building_masks:
        building_mask |= m
    road_masks = [buffer_centerline(r, widths, g) for r in roads]
    road_mask = np.zeros_like(building_mask)
    for m in road_masks:
        road_mask |= m
    road_mask &= ~building_mask

    img = np.empty((3, p.extent_px, p.extent_px))
    for c in range(3):
        img[c] = style.ground_rgb[c]
    if style.district_tint > 0:
        # 3x3 districts with their own ground tint: another scene-scale mode
        tints = rng.uniform(-style.district_tint, style.district_tint, size=(3, 3, 3))
        edges = np.linspace(0, p.extent_px, 4).astype(int)
        for di in range(3):
            for dj in range(3):
                img[:, edges[di]:edges[di + 1], edges[dj]:edges[dj + 1]] += tints[:, di, dj][:, None, None]
    for c in range(3):
        img[c][road_mask] = style.road_rgb[c]

    # ground features (parks, dirt, water): rectangular background patches,
    # deliberately building-shaped so appearance alone cannot separate classes
    n_features = int(round(0.16 * extent * extent / 900.0))
    free = ~(building_mask | road_mask)
    for _ in range(n_features):
        fw = rng.uniform(14.0, 46.0)
        fh = rng.uniform(14.0, 46.0)
        fx = rng.uniform(0.0, extent - fw)
        fy = rng.uniform(0.0, extent - fh)
        color = np.array(style.ground_features[int(rng.integers(len(style.ground_features)))], dtype=float)
        y0, y1 = int(np.ceil(fy)), min(p.extent_px - 1, int(np.floor(fy + fh)))
        x0, x1 = int(np.ceil(fx)), min(p.extent_px - 1, int(np.floor(fx + fw)))
        patch_mask = np.zeros_like(free)
        patch_mask[y0 : y1 + 1, x0 : x1 + 1] = True
        patch_mask &= free
        img[:, patch_mask] = color[:, None]

    # per-object color variation (drawn in a fixed order for determinism)
    for m in road_masks:
        jit = rng.uniform(-style.road_jitter, style.road_jitter, size=3)
        img[:, m & road_mask] += jit[:, None]
    for m in building_masks:
        material = np.array(style.roof_materials[int(rng.integers(len(style.roof_materials)))], dtype=float)
        jit = rng.uniform(-style.roof_jitter, style.roof_jitter, size=3)
        img[:, m] = (material + jit)[:, None]

    # building shadows fall on ground pixels only
    dx, dy = style.shadow_offset_px
    shadow = np.zeros_like(building_mask)
    src = building_mask[
        max(0, -dy) : building_mask.shape[0] - max(0, dy),
        max(0, -dx) : building_mask.shape[1] - max(0, dx),
    ]
    shadow[
        max(0, dy) : shadow.shape[0] - max(0, -dy),
        max(0, dx) : shadow.shape[1] - max(0, -dx),
    ] = src
    shadow &= ~(building_mask | road_mask)
    img[:, shadow] *= 1.0 - style.shadow_strength

    if style.illumination_amp > 0:
        img *= _illumination_field(rng, p.extent_px, style.illumination_amp)

    if style.texture_sigma > 0:
        img += rng.normal(0.0, style.texture_sigma, size=img.shape)
    img = np.clip(np.round(img), 0.0, 255.0)
    return ImageRaster(img, g), buildings, roads


def _illumination_field(rng, extent: int, amp: float, grid: int = 5) -> np.ndarray:
    """Smooth multiplicative gain field from a bilinearly upsampled coarse grid."""
    coarse = rng.uniform(1.0 - amp, 1.0 + amp, size=(grid, grid))
    pos = np.linspace(0.0, grid - 1.0, extent)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, grid - 1)
    f = pos - i0
    rows = coarse[i0][:, i0] * np.outer(1 - f, 1 - f) \
        + coarse[i0][:, i1] * np.outer(1 - f, f) \
        + coarse[i1][:, i0] * np.outer(f, 1 - f) \
        + coarse[i1][:, i1] * np.outer(f, f)
    return rows


def export_osm(
    buildings: list[BuildingPolygon],
    roads: list[RoadCenterline],
    g: RasterGeoref,
) -> bytes:
    """Serialize geometry as an OSM 0.6 XML document.

    Coordinates are written with repr precision, so parsing the document
    back reproduces every GeoPoint bit-for-bit.
    """
    root = ET.Element("osm", {"version": "0.6", "generator": "mapseg-synth"})
    node_id = 0
    way_id = 0

    def add_node(point: GeoPoint) -> int:
        nonlocal node_id
        node_id += 1
        ET.SubElement(root, "node", {"id": str(node_id), "lat": repr(point.lat), "lon": repr(point.lon)})
        return node_id

    for b in buildings:
        refs = [add_node(q) for q in b.ring[:-1]]
        refs.append(refs[0])
        way_id += 1
        way = ET.SubElement(root, "way", {"id": str(way_id)})
        for ref in refs:
            ET.SubElement(way, "nd", {"ref": str(ref)})
        ET.SubElement(way, "tag", {"k": "building", "v": "yes"})
    for r in roads:
        refs = [add_node(q) for q in r.points]
        way_id += 1
        way = ET.SubElement(root, "way", {"id": str(way_id)})
        for ref in refs:
            ET.SubElement(way, "nd", {"ref": str(ref)})
        ET.SubElement(way, "tag", {"k": "highway", "v": r.category})

    return ET.tostring(root, encoding="UTF-8", xml_declaration=True)
