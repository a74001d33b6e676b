"""From vector map data to a pixel label raster.

Builds a small OSM XML document by hand, parses it, extracts the building
polygon and road centerline, and rasterizes both onto a georeferenced grid
using the collision rule (buildings win contested pixels).
"""

from pathlib import Path

from mapseg.geo import GeoPoint, RasterGeoref
from mapseg.labelgen import (
    RoadWidthTable,
    label_stats,
    rasterize_scene,
    render_label_overlay,
    save_label_png,
)
from mapseg.osm import extract_buildings, extract_roads, parse_osm
from mapseg.pipeline import save_rgba_png

OUT = Path(__file__).parent / "output" / "01"
OUT.mkdir(parents=True, exist_ok=True)

# A 128x128 raster at 0.5 m/px anchored near Potsdam.
georef = RasterGeoref(GeoPoint(13.06, 52.40), gsd_m=0.5, width_px=128, height_px=128)

# Hand-written OSM subset: one building, one residential road crossing it.
document = b"""<?xml version='1.0'?>
<osm version="0.6">
  <node id="1" lat="52.399855" lon="13.060148"/>
  <node id="2" lat="52.399855" lon="13.060370"/>
  <node id="3" lat="52.399752" lon="13.060370"/>
  <node id="4" lat="52.399752" lon="13.060148"/>
  <node id="10" lat="52.399900" lon="13.060000"/>
  <node id="11" lat="52.399700" lon="13.060500"/>
  <way id="100">
    <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="1"/>
    <tag k="building" v="yes"/>
  </way>
  <way id="101">
    <nd ref="10"/><nd ref="11"/>
    <tag k="highway" v="residential"/>
  </way>
</osm>
"""

nodes, ways, diagnostics = parse_osm(document)
print(f"parsed {len(nodes)} nodes, {len(ways)} ways ({len(diagnostics)} diagnostics)")

buildings = extract_buildings(nodes, ways, diagnostics)
roads = extract_roads(nodes, ways, diagnostics)
print(f"extracted {len(buildings)} building(s), {len(roads)} road(s)")
print(f"road category: {roads[0].category}")

widths = RoadWidthTable()
labels = rasterize_scene(buildings, roads, widths, georef, diagnostics)
stats = label_stats(labels)
print("class fractions (background, building, road):",
      [round(f, 4) for f in stats.fractions])

# Where the road band crosses the building polygon, pixels stay building.
save_label_png(labels, OUT / "labels.png")
save_rgba_png(render_label_overlay(labels.classes), OUT / "overlay.png")
print(f"wrote {OUT/'labels.png'} and {OUT/'overlay.png'}")
