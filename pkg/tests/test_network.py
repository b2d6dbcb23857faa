"""Parsing, validation, and serialization of network files."""

import pytest

from heatgrid import network as net
from heatgrid.errors import (
    EmptyRegion,
    ParseError,
    UnboundedRegion,
    ValidationError,
)


def test_load_micro(micro):
    assert micro.name == "micro"
    assert micro.horizon_hours == 4
    assert [n.id for n in micro.heat_nodes] == ["src", "jct", "lod"]
    assert micro.node("src").kind == net.SOURCE
    assert micro.node("src").tau_source == 90.0
    assert micro.pipe("p1").m_nominal == 0.7
    assert micro.bus("b2").p_load == (1.0, 1.2, 0.9, 1.1)
    assert micro.node("lod").heat_load == (0.3, 0.35, 0.25, 0.3)


def test_load_small(small):
    assert len(small.pipes) == 7
    assert len(small.buses) == 6
    assert len(small.chps) == 1
    assert len(small.boilers) == 5
    assert len(small.thermal_units) == 2


def test_units_lookup(small):
    chp = small.chps[0]
    assert chp in small.units_at_node("n1")
    assert chp in small.units_at_bus("b1")
    assert [u.id for u in small.units_at_node("n5")] == ["pk5"]


def test_adjacency(small):
    in_map, out_map = net.derive_adjacency(small)
    assert set(out_map["n3"]) == {"p34", "p35", "p36"}
    assert set(in_map["n4"]) == {"p24", "p34"}
    assert in_map["n1"] == []


def test_round_trip(micro):
    d = net.serialize(micro)
    again = net.network_from_dict(d)
    assert net.serialize(again) == d


def test_pipe_window_inherits_downstream_node(micro):
    # no explicit window on p1 -> defaults to the jct node window
    p1 = micro.pipe("p1")
    jct = micro.node("jct")
    assert (p1.tau_pipe_min, p1.tau_pipe_max) == (jct.tau_min, jct.tau_max)


def test_explicit_pipe_window_round_trips(micro_copy):
    micro_copy["pipes"][0]["tau_pipe_min"] = 48.0
    micro_copy["pipes"][0]["tau_pipe_max"] = 91.0
    m = net.network_from_dict(micro_copy)
    assert m.pipe("p1").tau_pipe_min == 48.0
    d = net.serialize(m)
    p = next(p for p in d["pipes"] if p["id"] == "p1")
    assert p["tau_pipe_min"] == 48.0 and p["tau_pipe_max"] == 91.0
    # inherited windows stay implicit
    assert "tau_pipe_min" not in next(p for p in d["pipes"] if p["id"] == "p2")


def test_validation_collects_all_defects(micro_copy):
    micro_copy["pipes"][0]["m_min"] = 5.0      # inverts the flow box
    micro_copy["pipes"][1]["to"] = "ghost"     # dangling endpoint
    del micro_copy["heat_nodes"][0]["tau_source"]
    with pytest.raises(ValidationError) as exc:
        net.network_from_dict(micro_copy)
    text = "\n".join(exc.value.defects)
    assert len(exc.value.defects) >= 3
    assert "p1" in text and "ghost" in text and "src" in text


def test_schema_rejects_missing_sections(micro_copy):
    del micro_copy["meta"]
    with pytest.raises((ParseError, ValidationError)):
        net.network_from_dict(micro_copy)


def test_parse_error_on_bad_json(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        net.load_network(bad)


def test_load_length_must_match_horizon(micro_copy):
    micro_copy["loads"]["heat"]["lod"] = [0.3, 0.4]
    with pytest.raises(ValidationError):
        net.network_from_dict(micro_copy)


def test_chp_region_vertices():
    u = net.ChpUnit(id="c", bus_id="b", node_id="n", cost=(0, 1, 0, 1, 0, 0),
                    region=((-1.0, 0.4, 0.0), (1.0, 0.6, 8.0), (1.0, 0.0, 6.0)))
    verts = net.validate_chp_region(u)
    assert (0.0, 0.0) in verts
    assert any(abs(p - 3.2) < 1e-12 and abs(h - 8.0) < 1e-12 for p, h in verts)
    assert all(p >= -1e-9 and h >= -1e-9 for p, h in verts)


def test_chp_region_unbounded():
    u = net.ChpUnit(id="c", bus_id="b", node_id="n", cost=(0, 1, 0, 1, 0, 0),
                    region=((-1.0, 0.0, 1.0),))  # only P >= -1: open along H
    with pytest.raises(UnboundedRegion):
        net.validate_chp_region(u)


def test_chp_region_empty():
    u = net.ChpUnit(id="c", bus_id="b", node_id="n", cost=(0, 1, 0, 1, 0, 0),
                    region=((1.0, 1.0, -5.0), (1.0, 0.0, 6.0), (0.0, 1.0, 8.0)))
    with pytest.raises(EmptyRegion):
        net.validate_chp_region(u)


def test_chain_fixture_parses(chain3):
    assert chain3.horizon_hours == 1
    assert len(chain3.pipes) == 3
