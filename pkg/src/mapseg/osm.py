"""OSM XML ingestion: nodes/ways parsing and building/road extraction.

Supports the 0.6 XML schema subset `osm -> node/way`, `way -> nd/tag`.
Relations (multipolygons with holes) are deliberately unsupported and are
skipped with a diagnostic.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from io import BytesIO
from typing import IO

from .errors import MalformedDocument
from .geo import GeoPoint

#: Road categories with dedicated average widths; any other highway value
#: maps to "other".
ROAD_CATEGORIES = (
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "residential",
    "service",
    "other",
)

_HIGHWAY_MAP = {c: c for c in ROAD_CATEGORIES if c != "other"}


@dataclass(frozen=True)
class OsmNode:
    id: int
    location: GeoPoint


@dataclass
class OsmWay:
    id: int
    node_refs: tuple[int, ...]
    tags: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class BuildingPolygon:
    """Closed ring of corner points (first == last)."""

    ring: tuple[GeoPoint, ...]
    source_id: int


@dataclass(frozen=True)
class RoadCenterline:
    points: tuple[GeoPoint, ...]
    category: str
    source_id: int


def parse_osm(document: bytes | IO[bytes]) -> tuple[list[OsmNode], list[OsmWay], list[str]]:
    """Parse an OSM XML document into typed nodes and ways.

    Unknown elements are skipped and counted in the diagnostics; nodes
    without id/lat/lon and ways with fewer than two node refs are skipped
    likewise.  A syntactically broken document raises MalformedDocument
    with the reported position.
    """
    if isinstance(document, (bytes, bytearray)):
        document = BytesIO(document)
    try:
        root = ET.parse(document).getroot()
    except ET.ParseError as exc:
        raise MalformedDocument(f"XML syntax error at line {exc.position[0]}, column {exc.position[1]}") from exc

    nodes: dict[int, OsmNode] = {}
    ways: dict[int, OsmWay] = {}
    diagnostics: list[str] = []

    for child in root:
        if child.tag == "node":
            try:
                nid = int(child.attrib["id"])
                lat = float(child.attrib["lat"])
                lon = float(child.attrib["lon"])
            except (KeyError, ValueError):
                diagnostics.append(f"node missing id/lat/lon attribute, skipped: {child.attrib}")
                continue
            if nid in nodes:
                diagnostics.append(f"duplicate node id {nid}, keeping first occurrence")
                continue
            nodes[nid] = OsmNode(nid, GeoPoint(lon, lat))
        elif child.tag == "way":
            try:
                wid = int(child.attrib["id"])
            except (KeyError, ValueError):
                diagnostics.append(f"way missing id attribute, skipped: {child.attrib}")
                continue
            refs: list[int] = []
            tags: dict[str, str] = {}
            for member in child:
                if member.tag == "nd":
                    try:
                        refs.append(int(member.attrib["ref"]))
                    except (KeyError, ValueError):
                        diagnostics.append(f"way {wid}: nd without ref, skipped member")
                elif member.tag == "tag":
                    if "k" in member.attrib and "v" in member.attrib:
                        tags[member.attrib["k"]] = member.attrib["v"]
                else:
                    diagnostics.append(f"way {wid}: unsupported member element <{member.tag}>")
            if len(refs) < 2:
                diagnostics.append(f"way {wid}: fewer than 2 node refs, skipped")
                continue
            if wid in ways:
                diagnostics.append(f"duplicate way id {wid}, keeping first occurrence")
                continue
            ways[wid] = OsmWay(wid, tuple(refs), tags)
        else:
            diagnostics.append(f"unsupported element <{child.tag}>, skipped")

    node_list = [nodes[k] for k in sorted(nodes)]
    way_list = [ways[k] for k in sorted(ways)]
    return node_list, way_list, diagnostics


def _resolve(way: OsmWay, index: dict[int, OsmNode], diagnostics: list[str]) -> list[GeoPoint] | None:
    points = []
    for ref in way.node_refs:
        node = index.get(ref)
        if node is None:
            diagnostics.append(f"way {way.id}: unresolved node ref {ref}, way rejected")
            return None
        points.append(node.location)
    return points


def _ring_area(ring: list[GeoPoint]) -> float:
    # Shoelace on raw lon/lat; only used to detect degenerate (zero) area.
    s = 0.0
    for a, b in zip(ring, ring[1:]):
        s += a.lon * b.lat - b.lon * a.lat
    return 0.5 * s


def extract_buildings(
    nodes: list[OsmNode],
    ways: list[OsmWay],
    diagnostics: list[str] | None = None,
) -> list[BuildingPolygon]:
    """One closed polygon per way carrying any `building` tag.

    Open ways, ways with unresolved refs, and degenerate rings are rejected
    with a diagnostic.  Output is sorted by source way id and every returned
    coordinate is bit-for-bit a node location.
    """
    diags = diagnostics if diagnostics is not None else []
    index = {n.id: n for n in nodes}
    out = []
    for way in sorted(ways, key=lambda w: w.id):
        if "building" not in way.tags:
            continue
        if way.node_refs[0] != way.node_refs[-1]:
            diags.append(f"way {way.id}: building way is not closed, rejected")
            continue
        points = _resolve(way, index, diags)
        if points is None:
            continue
        if len(points) < 4:
            diags.append(f"way {way.id}: closed ring needs >= 4 points, rejected")
            continue
        if _ring_area(points) == 0.0:
            diags.append(f"way {way.id}: zero-area building ring, rejected")
            continue
        out.append(BuildingPolygon(tuple(points), way.id))
    return out


def extract_roads(
    nodes: list[OsmNode],
    ways: list[OsmWay],
    diagnostics: list[str] | None = None,
) -> list[RoadCenterline]:
    """One centerline per way carrying a `highway` tag.

    Unmapped highway values fall back to category "other".  Consecutive
    repeated node refs are collapsed; a way left with fewer than two points
    is rejected.  A way tagged both building and highway appears in both
    extractor outputs; the label composition rule settles contested pixels.
    """
    diags = diagnostics if diagnostics is not None else []
    index = {n.id: n for n in nodes}
    out = []
    for way in sorted(ways, key=lambda w: w.id):
        value = way.tags.get("highway")
        if value is None:
            continue
        points = _resolve(way, index, diags)
        if points is None:
            continue
        # collapse exact consecutive ref repeats
        deduped = [points[0]]
        prev_ref = way.node_refs[0]
        for ref, point in zip(way.node_refs[1:], points[1:]):
            if ref == prev_ref:
                continue
            deduped.append(point)
            prev_ref = ref
        if len(deduped) < 2:
            diags.append(f"way {way.id}: centerline collapsed to a single point, rejected")
            continue
        out.append(RoadCenterline(tuple(deduped), _HIGHWAY_MAP.get(value, "other"), way.id))
    return out


def write_diagnostics(diagnostics: list[str], sink) -> None:
    """Write diagnostics as line-oriented text to a file-like sink."""
    for line in diagnostics:
        sink.write(line + "\n")
