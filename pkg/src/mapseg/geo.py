"""Lon/lat to pixel transforms over spherical Web Mercator.

Conventions used by every raster in the toolkit:

* spherical Mercator (web-tile convention), earth radius 6378137 m;
* pixel (0, 0) is the CENTER of the upper-left pixel, x grows east,
  y grows down, so a raster of width W covers pixel x in [-0.5, W-0.5];
* the ground sampling distance (gsd_m) is the true metric pixel size at
  the raster's central latitude; Mercator stretch across the raster is
  accepted and not compensated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IoFailure, OutOfExtent

EARTH_RADIUS_M = 6378137.0
#: Latitude bound of Mercator validity, atan(sinh(pi)) in degrees.
MAX_MERCATOR_LAT = math.degrees(math.atan(math.sinh(math.pi)))


def _merc_x(lon_deg: float) -> float:
    return EARTH_RADIUS_M * math.radians(lon_deg)


def _merc_y(lat_deg: float) -> float:
    return EARTH_RADIUS_M * math.log(math.tan(math.pi / 4.0 + math.radians(lat_deg) / 2.0))


def _inv_merc_lon(x_m: float) -> float:
    return math.degrees(x_m / EARTH_RADIUS_M)


def _inv_merc_lat(y_m: float) -> float:
    return math.degrees(2.0 * math.atan(math.exp(y_m / EARTH_RADIUS_M)) - math.pi / 2.0)


@dataclass(frozen=True)
class GeoPoint:
    """WGS84 lon/lat in degrees; lon normalized to [-180, 180)."""

    lon: float
    lat: float

    def __post_init__(self) -> None:
        lon = float(self.lon)
        if not -180.0 <= lon < 180.0:
            lon = ((lon + 180.0) % 360.0) - 180.0
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "lat", float(self.lat))
        if not -MAX_MERCATOR_LAT < self.lat < MAX_MERCATOR_LAT:
            raise ValueError(f"latitude {self.lat} outside Mercator validity range")


@dataclass(frozen=True)
class RasterGeoref:
    """Georeference of a north-up raster.

    `origin` is the geographic location of the center of pixel (0, 0).
    """

    origin: GeoPoint
    gsd_m: float
    width_px: int
    height_px: int

    def __post_init__(self) -> None:
        if self.gsd_m <= 0:
            raise ValueError("gsd_m must be positive")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("raster dimensions must be positive")
        object.__setattr__(self, "_merc_per_px", self._solve_scale())
        # Validity of the footprint: no antimeridian crossing, no polar overflow.
        m = self.merc_per_px
        x0, y0 = _merc_x(self.origin.lon), _merc_y(self.origin.lat)
        bound = math.pi * EARTH_RADIUS_M
        if x0 - 0.5 * m < -bound or x0 + (self.width_px - 0.5) * m > bound:
            raise ValueError("raster extent crosses the antimeridian")
        if abs(y0 + 0.5 * m) > bound or abs(y0 - (self.height_px - 0.5) * m) > bound:
            raise ValueError("raster extent exceeds Mercator latitude validity")

    def _solve_scale(self) -> float:
        # gsd_m is defined at the central latitude, which itself depends on
        # the metric pixel size; the fixed point converges in a few rounds
        # because cos(lat) varies slowly across a city-sized raster.
        y0 = _merc_y(self.origin.lat)
        yc_px = (self.height_px - 1) / 2.0
        scale = self.gsd_m / math.cos(math.radians(self.origin.lat))
        for _ in range(12):
            lat_c = _inv_merc_lat(y0 - scale * yc_px)
            new = self.gsd_m / math.cos(math.radians(lat_c))
            if abs(new - scale) <= 1e-15 * scale:
                scale = new
                break
            scale = new
        return scale

    @property
    def merc_per_px(self) -> float:
        """Mercator meters per pixel (gsd_m inflated by 1/cos at center)."""
        return self._merc_per_px  # type: ignore[attr-defined]

    @property
    def center_lat(self) -> float:
        return _inv_merc_lat(_merc_y(self.origin.lat) - self.merc_per_px * (self.height_px - 1) / 2.0)


def lonlat_to_pixel(p: GeoPoint, g: RasterGeoref) -> tuple[float, float]:
    """Map a geographic point to continuous pixel coordinates.

    Raises OutOfExtent if the point falls more than one pixel outside the
    raster footprint.
    """
    m = g.merc_per_px
    x = (_merc_x(p.lon) - _merc_x(g.origin.lon)) / m
    y = (_merc_y(g.origin.lat) - _merc_y(p.lat)) / m
    _check_bounds(x, y, g)
    return x, y


def pixel_to_lonlat(x: float, y: float, g: RasterGeoref) -> GeoPoint:
    """Inverse of lonlat_to_pixel; same one-pixel tolerance band."""
    _check_bounds(x, y, g)
    m = g.merc_per_px
    lon = _inv_merc_lon(_merc_x(g.origin.lon) + x * m)
    lat = _inv_merc_lat(_merc_y(g.origin.lat) - y * m)
    return GeoPoint(lon, lat)


def _check_bounds(x: float, y: float, g: RasterGeoref) -> None:
    if not (-1.5 <= x <= g.width_px + 0.5) or not (-1.5 <= y <= g.height_px + 0.5):
        raise OutOfExtent(
            f"pixel ({x:.3f}, {y:.3f}) more than 1 px outside raster "
            f"{g.width_px}x{g.height_px}"
        )


def project_lonlat_arrays(lons: np.ndarray, lats: np.ndarray, g: RasterGeoref) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized, unchecked lon/lat -> pixel transform.

    Used for rasterizing geometry that may legitimately extend beyond the
    raster (clipping happens later, per pixel).
    """
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    m = g.merc_per_px
    x = (EARTH_RADIUS_M * np.radians(lons) - _merc_x(g.origin.lon)) / m
    y = (_merc_y(g.origin.lat) - EARTH_RADIUS_M * np.log(np.tan(np.pi / 4.0 + np.radians(lats) / 2.0))) / m
    return x, y


def unproject_pixel_arrays(xs: np.ndarray, ys: np.ndarray, g: RasterGeoref) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized, unchecked pixel -> lon/lat transform (synthesis plumbing)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    m = g.merc_per_px
    lon = np.degrees((_merc_x(g.origin.lon) + xs * m) / EARTH_RADIUS_M)
    lat = np.degrees(2.0 * np.arctan(np.exp((_merc_y(g.origin.lat) - ys * m) / EARTH_RADIUS_M)) - np.pi / 2.0)
    return lon, lat


def georef_sidecar_path(raster_path: str | Path) -> Path:
    """Sidecar file `<name>.georef.json` next to a raster file."""
    p = Path(raster_path)
    return p.with_name(p.stem + ".georef.json")


def write_georef(g: RasterGeoref, raster_path: str | Path) -> Path:
    path = georef_sidecar_path(raster_path)
    payload = {
        "origin_lon": g.origin.lon,
        "origin_lat": g.origin.lat,
        "gsd_m": g.gsd_m,
        "width_px": g.width_px,
        "height_px": g.height_px,
    }
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write georef sidecar {path}") from exc
    return path


def read_georef(raster_path: str | Path) -> RasterGeoref:
    path = georef_sidecar_path(raster_path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read georef sidecar {path}") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"georef sidecar {path} is not valid JSON") from exc
    return RasterGeoref(
        origin=GeoPoint(payload["origin_lon"], payload["origin_lat"]),
        gsd_m=payload["gsd_m"],
        width_px=payload["width_px"],
        height_px=payload["height_px"],
    )
