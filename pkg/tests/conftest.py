"""Shared fixtures: bundled instances and a tiny synthetic fixture network."""

import copy
import json
from pathlib import Path

import pytest

from heatgrid import network as net

INSTANCE_DIR = Path(__file__).resolve().parent.parent / "instances"


@pytest.fixture(scope="session")
def micro_dict():
    with open(INSTANCE_DIR / "micro.json", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="session")
def micro():
    return net.load_network(INSTANCE_DIR / "micro.json")


@pytest.fixture(scope="session")
def small():
    return net.load_network(INSTANCE_DIR / "small.json")


@pytest.fixture()
def micro_copy(micro_dict):
    """Mutable deep copy for validation tests."""
    return copy.deepcopy(micro_dict)


def chain_fixture(loss_ratios, m_nominal=1.0):
    """A source -> ... -> load chain whose pipes have exactly the given
    nu*L/(c*m_nominal) ratios under pinned nominal flow."""
    c = 0.004182
    n = len(loss_ratios)
    nodes = [{"id": "s", "kind": "source", "tau_min": 30.0, "tau_max": 95.0,
              "tau_source": 90.0}]
    for k in range(1, n):
        nodes.append({"id": f"j{k}", "kind": "junction",
                      "tau_min": 30.0, "tau_max": 95.0})
    nodes.append({"id": "d", "kind": "load", "tau_min": 30.0, "tau_max": 95.0})
    ids = [nd["id"] for nd in nodes]
    pipes = []
    for k, ratio in enumerate(loss_ratios):
        pipes.append({
            "id": f"p{k}", "from": ids[k], "to": ids[k + 1], "length": 100.0,
            "heat_transfer_coeff": ratio * c * m_nominal / 100.0,
            "m_min": 0.1, "m_max": 5.0, "m_nominal": m_nominal,
        })
    return {
        "meta": {"name": "chain", "T": 1, "tau_ambient": 10.0,
                 "specific_heat": c, "base_mva": 10.0},
        "heat_nodes": nodes,
        "pipes": pipes,
        "buses": [{"id": "b1"}],
        "lines": [],
        "units": [
            {"type": "boiler", "id": "hb_s", "node_id": "s",
             "cost_c": 25.0, "h_min": 0.0, "h_max": 5.0},
            {"type": "boiler", "id": "hb_d", "node_id": "d",
             "cost_c": 70.0, "h_min": 0.0, "h_max": 5.0},
            {"type": "tu", "id": "g1", "bus_id": "b1", "cost_c1": 15.0,
             "cost_c2": 0.0, "p_min": 0.0, "p_max": 2.0},
        ],
        "loads": {"heat": {"d": [0.25]}, "power": {"b1": [0.5]}},
    }


@pytest.fixture()
def chain3():
    return net.network_from_dict(chain_fixture([0.01, 0.05, 0.1]))
