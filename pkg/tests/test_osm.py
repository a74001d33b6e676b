import io

import pytest

from mapseg.errors import MalformedDocument
from mapseg.osm import extract_buildings, extract_roads, parse_osm, write_diagnostics


def osm_doc(body: str) -> bytes:
    return f'<?xml version="1.0"?>\n<osm version="0.6">\n{body}\n</osm>'.encode()


SQUARE_BUILDING = osm_doc(
    """
  <node id="1" lat="52.40000" lon="13.06000"/>
  <node id="2" lat="52.40000" lon="13.06010"/>
  <node id="3" lat="52.40008" lon="13.06010"/>
  <node id="4" lat="52.40008" lon="13.06000"/>
  <way id="10">
    <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="4"/><nd ref="1"/>
    <tag k="building" v="yes"/>
  </way>
"""
)


def test_parse_counts_nodes_and_ways():
    nodes, ways, diags = parse_osm(SQUARE_BUILDING)
    assert len(nodes) == 4
    assert len(ways) == 1
    assert diags == []
    assert ways[0].tags == {"building": "yes"}


def test_parse_empty_document():
    nodes, ways, diags = parse_osm(b"<osm/>")
    assert (len(nodes), len(ways), len(diags)) == (0, 0, 0)


def test_relation_skipped_with_diagnostic():
    nodes, ways, diags = parse_osm(osm_doc('<relation id="5"/>'))
    assert nodes == [] and ways == []
    assert len(diags) == 1
    assert "unsupported element" in diags[0]


def test_malformed_document_reports_position():
    with pytest.raises(MalformedDocument) as excinfo:
        parse_osm(b"<osm><node id=")
    assert "line" in str(excinfo.value)


def test_node_without_latlon_skipped():
    nodes, ways, diags = parse_osm(osm_doc('<node id="1" lat="52.4"/>'))
    assert nodes == []
    assert len(diags) == 1


def test_extract_building_square():
    nodes, ways, diags = parse_osm(SQUARE_BUILDING)
    polys = extract_buildings(nodes, ways, diags)
    assert len(polys) == 1
    assert len(polys[0].ring) == 5
    assert polys[0].ring[0] == polys[0].ring[-1]
    assert polys[0].source_id == 10
    # no invented coordinates: every ring point is a node location bit-for-bit
    locations = {(n.location.lon, n.location.lat) for n in nodes}
    assert all((p.lon, p.lat) in locations for p in polys[0].ring)


def test_open_building_way_rejected():
    doc = osm_doc(
        """
  <node id="1" lat="52.0" lon="13.0"/>
  <node id="2" lat="52.0" lon="13.1"/>
  <node id="3" lat="52.1" lon="13.1"/>
  <way id="7"><nd ref="1"/><nd ref="2"/><nd ref="3"/><tag k="building" v="yes"/></way>
"""
    )
    nodes, ways, _ = parse_osm(doc)
    diags: list[str] = []
    assert extract_buildings(nodes, ways, diags) == []
    assert len(diags) == 1
    assert "not closed" in diags[0]


def test_dangling_ref_rejected():
    doc = osm_doc(
        """
  <node id="1" lat="52.0" lon="13.0"/>
  <node id="2" lat="52.0" lon="13.1"/>
  <node id="3" lat="52.1" lon="13.1"/>
  <way id="7"><nd ref="1"/><nd ref="2"/><nd ref="99"/><nd ref="1"/><tag k="building" v="yes"/></way>
"""
    )
    nodes, ways, _ = parse_osm(doc)
    diags: list[str] = []
    assert extract_buildings(nodes, ways, diags) == []
    assert any("unresolved node ref 99" in d for d in diags)


def test_extract_road_categories():
    doc = osm_doc(
        """
  <node id="1" lat="52.0" lon="13.0"/>
  <node id="2" lat="52.0" lon="13.1"/>
  <way id="20"><nd ref="1"/><nd ref="2"/><tag k="highway" v="residential"/></way>
  <way id="21"><nd ref="1"/><nd ref="2"/><tag k="highway" v="bus_stop"/></way>
"""
    )
    nodes, ways, _ = parse_osm(doc)
    roads = extract_roads(nodes, ways)
    assert [r.category for r in roads] == ["residential", "other"]
    assert [r.source_id for r in roads] == [20, 21]


def test_way_with_building_and_highway_in_both_outputs():
    doc = osm_doc(
        """
  <node id="1" lat="52.0" lon="13.0"/>
  <node id="2" lat="52.0" lon="13.001"/>
  <node id="3" lat="52.001" lon="13.001"/>
  <way id="30">
    <nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="1"/>
    <tag k="building" v="yes"/><tag k="highway" v="service"/>
  </way>
"""
    )
    nodes, ways, _ = parse_osm(doc)
    assert len(extract_buildings(nodes, ways)) == 1
    roads = extract_roads(nodes, ways)
    assert len(roads) == 1
    assert roads[0].category == "service"


def test_repeated_single_point_way_rejected():
    doc = osm_doc(
        """
  <node id="1" lat="52.0" lon="13.0"/>
  <way id="40"><nd ref="1"/><nd ref="1"/><tag k="highway" v="service"/></way>
"""
    )
    nodes, ways, _ = parse_osm(doc)
    diags: list[str] = []
    assert extract_roads(nodes, ways, diags) == []
    assert any("single point" in d for d in diags)


def test_output_sorted_by_source_id_regardless_of_document_order():
    doc = osm_doc(
        """
  <node id="1" lat="52.0" lon="13.0"/>
  <node id="2" lat="52.0" lon="13.1"/>
  <way id="52"><nd ref="1"/><nd ref="2"/><tag k="highway" v="primary"/></way>
  <way id="51"><nd ref="2"/><nd ref="1"/><tag k="highway" v="trunk"/></way>
"""
    )
    nodes, ways, _ = parse_osm(doc)
    roads = extract_roads(nodes, ways)
    assert [r.source_id for r in roads] == [51, 52]


def test_zero_area_ring_rejected():
    doc = osm_doc(
        """
  <node id="1" lat="52.0" lon="13.0"/>
  <node id="2" lat="52.0" lon="13.1"/>
  <node id="3" lat="52.0" lon="13.2"/>
  <way id="60"><nd ref="1"/><nd ref="2"/><nd ref="3"/><nd ref="1"/><tag k="building" v="yes"/></way>
"""
    )
    nodes, ways, _ = parse_osm(doc)
    diags: list[str] = []
    assert extract_buildings(nodes, ways, diags) == []
    assert any("zero-area" in d for d in diags)


def test_write_diagnostics_line_oriented():
    sink = io.StringIO()
    write_diagnostics(["a", "b"], sink)
    assert sink.getvalue() == "a\nb\n"
