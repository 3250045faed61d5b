"""Graph structure, spatial builders and their brute-force oracles."""

import numpy as np
import pytest

from tgnn4i.graph import (
    GraphError,
    GraphTopology,
    build_delaunay_dag,
    build_knn_graph,
    delaunay_edges,
    load_edge_csv,
    project_lat_lon,
    save_edge_csv,
)


def brute_force_knn_edges(pos, k):
    """Exhaustive k nearest neighbors with ties broken by node index."""
    n = len(pos)
    edges = set()
    for node in range(n):
        dists = [(float(np.linalg.norm(pos[node] - pos[m])), m)
                 for m in range(n) if m != node]
        dists.sort()
        for _, m in dists[:k]:
            edges.add((m, node))
    return edges


def circumcircle_empty(pos, a, b, c, eps=1e-12):
    ax, ay = pos[a]
    bx, by = pos[b]
    cx, cy = pos[c]
    d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-14:
        return False
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay)
          + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx)
          + (cx**2 + cy**2) * (bx - ax)) / d
    r2 = (ax - ux) ** 2 + (ay - uy) ** 2
    for p in range(len(pos)):
        if p in (a, b, c):
            continue
        if (pos[p][0] - ux) ** 2 + (pos[p][1] - uy) ** 2 < r2 - eps:
            return False
    return True


def brute_force_delaunay_edges(pos):
    """Every pair that belongs to a triangle with an empty circumcircle."""
    n = len(pos)
    edges = set()
    for a in range(n):
        for b in range(a + 1, n):
            for c in range(b + 1, n):
                if circumcircle_empty(pos, a, b, c):
                    edges.update([(a, b), (b, c), (a, c)])
    return edges


# ---------------------------------------------------------------------------
# GraphTopology basics


def test_in_neighbors_empty_graph():
    g = GraphTopology(3, [], [], [])
    assert g.in_neighbors(1) == []


def test_in_neighbors_single_edge():
    g = GraphTopology(2, [0], [1], [0.7])
    assert g.in_neighbors(1) == [(0, 0.7)]
    assert g.in_neighbors(0) == []


def test_in_neighbors_out_of_range():
    g = GraphTopology(2, [0], [1], [1.0])
    with pytest.raises(GraphError, match="out of range"):
        g.in_neighbors(2)


def test_no_self_loops():
    with pytest.raises(GraphError, match="self-loop"):
        GraphTopology(2, [1], [1], [1.0])


def test_negative_weight_rejected():
    with pytest.raises(GraphError, match="weight"):
        GraphTopology(2, [0], [1], [-0.1])


def test_duplicate_edges_rejected():
    with pytest.raises(GraphError, match="duplicate"):
        GraphTopology(2, [0, 0], [1, 1], [1.0, 2.0])


def test_symmetric_edges_give_symmetric_neighbors():
    g = GraphTopology(2, [0, 1], [1, 0], [0.5, 0.5])
    assert g.in_neighbors(0) == [(1, 0.5)]
    assert g.in_neighbors(1) == [(0, 0.5)]


def test_aggregation_matrix_matches_neighbors():
    g = GraphTopology(3, [0, 2], [1, 1], [1.0, 0.5])
    mat = g.aggregation().mat.toarray()
    expected = np.zeros((3, 3))
    expected[1, 0] = 1.0 / 2
    expected[1, 2] = 0.5 / 2
    assert np.allclose(mat, expected, rtol=0, atol=0)


# ---------------------------------------------------------------------------
# k-nearest-neighbor builder


def test_knn_two_stations_degenerate_sigma():
    g = build_knn_graph(np.array([[0.0, 0.0], [1.0, 0.0]]), k=1)
    assert g.num_edges == 2
    # both edge distances are equal, so the spread is zero and weights are 1
    assert np.array_equal(g.weight, np.ones(2))


def test_knn_too_few_points():
    with pytest.raises(GraphError, match="k\\+1"):
        build_knn_graph(np.zeros((3, 2)), k=3)


def test_knn_matches_brute_force():
    rng = np.random.default_rng(11)
    pos = rng.uniform(0, 1, size=(30, 2))
    g = build_knn_graph(pos, k=3)
    assert set(zip(g.src.tolist(), g.dst.tolist())) == brute_force_knn_edges(pos, 3)
    assert np.all(g.in_degree == 3)


def test_knn_in_neighbors_count_is_k():
    rng = np.random.default_rng(4)
    g = build_knn_graph(rng.normal(size=(25, 2)), k=5)
    for n in range(25):
        assert len(g.in_neighbors(n)) == 5


def test_knn_weights_monotone_in_distance():
    rng = np.random.default_rng(7)
    pos = rng.uniform(0, 10, size=(40, 2))
    g = build_knn_graph(pos, k=4)
    dist = np.linalg.norm(pos[g.src] - pos[g.dst], axis=1)
    order = np.argsort(dist)
    assert np.all(np.diff(g.weight[order]) <= 1e-15)


def test_knn_weight_extremes():
    # two tight clusters far apart plus a k=2 graph forces one very long
    # edge within each node's neighbor list
    cluster = np.array([[0.0, 0.0], [0.05, 0.0], [0.0, 0.05]])
    pos = np.vstack([cluster, cluster + [12.0, 0.0]])
    g = build_knn_graph(pos, k=3)
    dist = np.linalg.norm(pos[g.src] - pos[g.dst], axis=1)
    assert g.weight[np.argmin(dist)] > 0.9
    assert g.weight[np.argmax(dist)] < 0.1


def test_knn_weight_formula():
    rng = np.random.default_rng(17)
    pos = rng.uniform(0, 1, size=(12, 2))
    g = build_knn_graph(pos, k=2)
    dist = np.linalg.norm(pos[g.src] - pos[g.dst], axis=1)
    sigma = dist.std()
    assert np.allclose(g.weight, np.exp(-((dist / (4 * sigma)) ** 2)), rtol=1e-12)


def test_projection_shape_and_scaling():
    lat = np.array([45.0, 45.5, 46.0])
    lon = np.array([10.0, 10.0, 11.0])
    xy = project_lat_lon(lat, lon)
    assert xy.shape == (3, 2)
    # same longitude -> same x; latitude degrees map linearly to y
    assert xy[0, 0] == xy[1, 0]
    assert xy[2, 1] > xy[1, 1] > xy[0, 1]


# ---------------------------------------------------------------------------
# Delaunay DAG builder


def test_delaunay_three_points():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
    g = build_delaunay_dag(pos, [2, 0, 1])
    assert g.num_edges == 3
    g.topological_order()  # acyclic
    assert np.array_equal(g.weight, np.ones(3))


def test_delaunay_orientation_follows_order():
    pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
    g = build_delaunay_dag(pos, [1, 2, 0])
    rank = {1: 0, 2: 1, 0: 2}
    for s, d in zip(g.src, g.dst):
        assert rank[int(s)] < rank[int(d)]


def test_delaunay_collinear_rejected():
    pos = np.column_stack([np.linspace(0, 1, 6), np.linspace(0, 2, 6)])
    with pytest.raises(GraphError, match="resample"):
        build_delaunay_dag(pos, list(range(6)))


def test_delaunay_edges_match_circumcircle_oracle():
    rng = np.random.default_rng(23)
    pos = rng.uniform(0, 1, size=(20, 2))
    produced = set(delaunay_edges(pos))
    assert produced == brute_force_delaunay_edges(pos)


def test_delaunay_dag_edge_count_and_acyclicity():
    rng = np.random.default_rng(5)
    pos = rng.uniform(0, 1, size=(24, 2))
    undirected = delaunay_edges(pos)
    g = build_delaunay_dag(pos, rng.permutation(24))
    assert g.num_edges == len(undirected)
    order = g.topological_order()
    assert sorted(order) == list(range(24))


# ---------------------------------------------------------------------------
# CSV round trip


def test_edge_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    g = build_knn_graph(rng.normal(size=(15, 2)), k=3)
    path = tmp_path / "graph.csv"
    save_edge_csv(g, path)
    loaded = load_edge_csv(path, num_nodes=15)
    assert np.array_equal(loaded.src, g.src)
    assert np.array_equal(loaded.dst, g.dst)
    assert np.array_equal(loaded.weight, g.weight)


def test_edge_csv_rejects_self_loop(tmp_path):
    path = tmp_path / "graph.csv"
    path.write_text("src,dst,weight\n1,1,0.5\n")
    with pytest.raises(GraphError, match="self-loop"):
        load_edge_csv(path)


def test_edge_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "graph.csv"
    path.write_text("a,b,c\n0,1,0.5\n")
    with pytest.raises(GraphError, match="header"):
        load_edge_csv(path)


def test_largest_component_filter(tmp_path):
    path = tmp_path / "graph.csv"
    # component {0,1,2} (weakly connected) and component {3,4}; node 5 isolated
    path.write_text("src,dst,weight\n0,1,1.0\n2,1,1.0\n3,4,1.0\n")
    sub, kept = load_edge_csv(path, num_nodes=6, keep_largest_component=True)
    assert kept.tolist() == [0, 1, 2]
    assert sub.num_nodes == 3
    assert sub.num_edges == 2
