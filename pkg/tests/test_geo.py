import math

import numpy as np
import pytest

from mapseg.errors import OutOfExtent
from mapseg.geo import (
    EARTH_RADIUS_M,
    GeoPoint,
    RasterGeoref,
    lonlat_to_pixel,
    pixel_to_lonlat,
    project_lonlat_arrays,
    read_georef,
    unproject_pixel_arrays,
    write_georef,
)

R = EARTH_RADIUS_M


# Independent spherical-Mercator oracle: x = R*lon_rad,
# y = R*ln(tan(pi/4 + lat_rad/2)), then affine to pixel coordinates.
def oracle_pixel(lon, lat, g):
    mx = R * math.radians(lon)
    my = R * math.log(math.tan(math.pi / 4 + math.radians(lat) / 2))
    ox = R * math.radians(g.origin.lon)
    oy = R * math.log(math.tan(math.pi / 4 + math.radians(g.origin.lat) / 2))
    return (mx - ox) / g.merc_per_px, (oy - my) / g.merc_per_px


def oracle_lat_from_merc_y(y_m):
    # lat = 2*atan(exp(y/R)) - pi/2
    return math.degrees(2 * math.atan(math.exp(y_m / R)) - math.pi / 2)


@pytest.fixture
def potsdam_georef():
    # Large enough footprint (at 9.1 cm GSD) to contain 13.06E / 52.40N.
    return RasterGeoref(GeoPoint(13.0, 52.42), gsd_m=0.091, width_px=60000, height_px=40000)


def test_origin_maps_to_pixel_zero(potsdam_georef):
    x, y = lonlat_to_pixel(potsdam_georef.origin, potsdam_georef)
    assert x == pytest.approx(0.0, abs=1e-9)
    assert y == pytest.approx(0.0, abs=1e-9)


def test_raster_center_of_100x100_is_49_5():
    g = RasterGeoref(GeoPoint(8.5, 47.4), gsd_m=0.5, width_px=100, height_px=100)
    center = pixel_to_lonlat(49.5, 49.5, g)
    x, y = lonlat_to_pixel(center, g)
    assert x == pytest.approx(49.5, abs=1e-6)
    assert y == pytest.approx(49.5, abs=1e-6)
    # and the center row sits at the latitude reported as central
    assert center.lat == pytest.approx(g.center_lat, abs=1e-12)


def test_forward_matches_mercator_oracle(potsdam_georef):
    g = potsdam_georef
    x, y = lonlat_to_pixel(GeoPoint(13.06, 52.40), g)
    ox, oy = oracle_pixel(13.06, 52.40, g)
    assert x == pytest.approx(ox, abs=1e-9)
    assert y == pytest.approx(oy, abs=1e-9)


def test_pixel_zero_maps_to_origin(potsdam_georef):
    p = pixel_to_lonlat(0.0, 0.0, potsdam_georef)
    assert p.lon == pytest.approx(potsdam_georef.origin.lon, abs=1e-12)
    assert p.lat == pytest.approx(potsdam_georef.origin.lat, abs=1e-12)


def test_inverse_matches_oracle_at_vertical_center(potsdam_georef):
    g = potsdam_georef
    yc = (g.height_px - 1) / 2
    p = pixel_to_lonlat(10.0, yc, g)
    oy = R * math.log(math.tan(math.pi / 4 + math.radians(g.origin.lat) / 2)) - yc * g.merc_per_px
    assert p.lat == pytest.approx(oracle_lat_from_merc_y(oy), abs=1e-12)


def test_round_trip_random_points(potsdam_georef):
    g = potsdam_georef
    rng = np.random.default_rng(42)
    xs = rng.uniform(-0.5, g.width_px - 0.5, size=1000)
    ys = rng.uniform(-0.5, g.height_px - 0.5, size=1000)
    worst = 0.0
    for x, y in zip(xs, ys):
        p = pixel_to_lonlat(x, y, g)
        x2, y2 = lonlat_to_pixel(p, g)
        worst = max(worst, abs(x2 - x), abs(y2 - y))
    assert worst < 1e-6


def test_monotonicity():
    g = RasterGeoref(GeoPoint(-71.1, 42.3), gsd_m=0.2, width_px=500, height_px=500)
    lons = np.linspace(-71.1, -71.0998, 20)
    lats = np.linspace(42.3, 42.2999, 20)
    xs = [lonlat_to_pixel(GeoPoint(lon, 42.2999), g)[0] for lon in lons]
    ys = [lonlat_to_pixel(GeoPoint(-71.0999, lat), g)[1] for lat in lats]
    assert all(b > a for a, b in zip(xs, xs[1:]))
    # decreasing latitude list -> increasing y
    assert all(b > a for a, b in zip(ys, ys[1:]))


def test_one_gsd_east_step_is_one_pixel():
    g = RasterGeoref(GeoPoint(13.0, 52.42), gsd_m=0.25, width_px=2000, height_px=2000)
    lat_c = g.center_lat
    # ground displacement of gsd_m meters east at the central latitude
    dlon = math.degrees(g.gsd_m / (R * math.cos(math.radians(lat_c))))
    x0, _ = lonlat_to_pixel(GeoPoint(13.0001, lat_c), g)
    x1, _ = lonlat_to_pixel(GeoPoint(13.0001 + dlon, lat_c), g)
    assert x1 - x0 == pytest.approx(1.0, abs=0.01)


def test_out_of_extent_raises():
    g = RasterGeoref(GeoPoint(8.5, 47.4), gsd_m=0.5, width_px=100, height_px=100)
    with pytest.raises(OutOfExtent):
        pixel_to_lonlat(102.0, 50.0, g)
    with pytest.raises(OutOfExtent):
        pixel_to_lonlat(50.0, -2.0, g)
    # 1-pixel tolerance band is allowed
    pixel_to_lonlat(100.4, -1.4, g)
    far = pixel_to_lonlat(100.4, 50.0, g)
    x, _ = lonlat_to_pixel(far, g)
    assert x == pytest.approx(100.4, abs=1e-6)


def test_out_of_extent_forward():
    g = RasterGeoref(GeoPoint(8.5, 47.4), gsd_m=0.5, width_px=100, height_px=100)
    with pytest.raises(OutOfExtent):
        lonlat_to_pixel(GeoPoint(8.52, 47.4), g)


def test_lon_normalization():
    assert GeoPoint(200.0, 10.0).lon == pytest.approx(-160.0)
    assert GeoPoint(-180.0, 10.0).lon == -180.0
    with pytest.raises(ValueError):
        GeoPoint(0.0, 86.0)


def test_vectorized_matches_scalar():
    g = RasterGeoref(GeoPoint(13.0, 52.42), gsd_m=0.3, width_px=400, height_px=300)
    rng = np.random.default_rng(3)
    xs = rng.uniform(0, 399, 50)
    ys = rng.uniform(0, 299, 50)
    lons, lats = unproject_pixel_arrays(xs, ys, g)
    px, py = project_lonlat_arrays(lons, lats, g)
    assert np.allclose(px, xs, atol=1e-6)
    assert np.allclose(py, ys, atol=1e-6)
    for i in range(0, 50, 10):
        p = pixel_to_lonlat(xs[i], ys[i], g)
        assert p.lon == pytest.approx(lons[i], abs=1e-12)
        assert p.lat == pytest.approx(lats[i], abs=1e-12)


def test_georef_sidecar_round_trip(tmp_path):
    g = RasterGeoref(GeoPoint(13.0625, 52.4001), gsd_m=0.091, width_px=777, height_px=555)
    raster = tmp_path / "scene.png"
    write_georef(g, raster)
    assert (tmp_path / "scene.georef.json").exists()
    g2 = read_georef(raster)
    assert g2 == g


def test_antimeridian_rejected():
    with pytest.raises(ValueError):
        RasterGeoref(GeoPoint(179.9999, 0.0), gsd_m=100.0, width_px=5000, height_px=10)
