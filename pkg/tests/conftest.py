"""Shared fixtures: small networks and worlds reused across test modules."""

import pytest

from fedtte import data, graph, model


def make_node(i, lat=0.0, lon=0.0):
    return graph.NodeRecord(id=i, categorical=(0, 0, 0), numeric=(lat, lon))


def make_edge(i, u, v, length_m=100.0, limit_kph=50.0):
    return graph.EdgeRecord(
        id=i, from_node=u, to_node=v, categorical=(0, 0), numeric=(length_m, limit_kph, 1.0, 3.5)
    )


def make_path_network(n_nodes=2):
    """Chain of nodes 0-1-...-(n-1) with one edge per consecutive pair."""
    nodes = [make_node(i, lat=float(i)) for i in range(n_nodes)]
    edges = [make_edge(i, i, i + 1) for i in range(n_nodes - 1)]
    return graph.build_network(nodes, edges)


def make_triangle_network():
    nodes = [make_node(i, lat=float(i)) for i in range(3)]
    edges = [make_edge(0, 0, 1), make_edge(1, 1, 2), make_edge(2, 2, 0)]
    return graph.build_network(nodes, edges)


@pytest.fixture
def path2():
    return make_path_network(2)


@pytest.fixture
def triangle():
    return make_triangle_network()


@pytest.fixture(scope="session")
def tiny_cfg():
    # smallest config that still exercises every tensor
    return model.ModelConfig(
        embed_dim=4,
        gcn_layers=1,
        hops=2,
        head_width=4,
        time_slots=4,
        holiday_dim=2,
        output_scale=1.0,
        personal_embed_dim=3,
        personal_dense_dim=3,
        profile_arity=3,
    )


@pytest.fixture(scope="session")
def tiny_world():
    # 2x2 grid: 4 nodes, 8 directed edges
    spec = data.WorldSpec(
        grid_rows=2,
        grid_cols=2,
        n_drivers=3,
        trips_per_day=6,
        congestion="flat",
        obs_sigma_s=0.0,
        bias_spread_s=0.0,
        time_slots=4,
        seed=7,
    )
    return data.generate_world(spec)


@pytest.fixture(scope="session")
def small_world():
    # 3x4 grid, 34 edges: the workhorse for end-to-end runs
    spec = data.WorldSpec(
        grid_rows=3,
        grid_cols=4,
        n_drivers=10,
        trips_per_day=8,
        congestion="flat",
        obs_sigma_s=0.0,
        bias_spread_s=0.0,
        seed=11,
    )
    return data.generate_world(spec)
