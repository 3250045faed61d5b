"""Directed weighted graphs with in-neighbor access, plus spatial builders.

The models aggregate over each node's parents N(n) = {m : (m,n) in E}. Two
builders construct the graphs used by the datasets: a k-nearest-neighbor
graph with distance-kernel edge weights, and a random DAG obtained by
orienting a Delaunay triangulation along a node ordering.
"""

from __future__ import annotations

import csv
import hashlib

import numpy as np
import scipy.sparse

from .autodiff import SparseOperand


class GraphError(ValueError):
    pass


class GraphTopology:
    """Immutable directed weighted graph with fast in-neighbor lookup."""

    def __init__(self, num_nodes: int, src, dst, weight):
        self.num_nodes = int(num_nodes)
        self.src = np.asarray(src, dtype=np.intp).copy()
        self.dst = np.asarray(dst, dtype=np.intp).copy()
        self.weight = np.asarray(weight, dtype=np.float64).copy()
        if not (self.src.shape == self.dst.shape == self.weight.shape) or self.src.ndim != 1:
            raise GraphError("edge arrays must be 1-D and equally long")
        if self.num_edges and (self.src.min() < 0 or self.dst.min() < 0
                               or max(self.src.max(), self.dst.max()) >= self.num_nodes):
            raise GraphError("edge endpoint out of range")
        if np.any(self.src == self.dst):
            raise GraphError("self-loops are not allowed")
        if not np.all(np.isfinite(self.weight)) or np.any(self.weight < 0):
            raise GraphError("edge weights must be finite and non-negative")
        pairs = set(zip(self.src.tolist(), self.dst.tolist()))
        if len(pairs) != self.num_edges:
            raise GraphError("duplicate edges are not allowed")
        # CSR-style in-neighbor index, grouped by target node.
        order = np.lexsort((self.src, self.dst))
        self._in_src = self.src[order]
        self._in_w = self.weight[order]
        counts = np.bincount(self.dst, minlength=self.num_nodes)
        self._in_ptr = np.concatenate([[0], np.cumsum(counts)])
        self.in_degree = counts
        self._agg = None

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def in_neighbors(self, n: int):
        """Parents of ``n`` as a list of (source node, edge weight)."""
        if not 0 <= n < self.num_nodes:
            raise GraphError(f"node id {n} out of range for {self.num_nodes} nodes")
        lo, hi = self._in_ptr[n], self._in_ptr[n + 1]
        return list(zip(self._in_src[lo:hi].tolist(), self._in_w[lo:hi].tolist()))

    def aggregation(self) -> SparseOperand:
        """Sparse matrix A with A[n, m] = e_{m,n} / |N(n)| for each edge."""
        if self._agg is None:
            deg = np.maximum(self.in_degree, 1).astype(np.float64)
            data = self.weight / deg[self.dst]
            mat = scipy.sparse.coo_matrix(
                (data, (self.dst, self.src)), shape=(self.num_nodes, self.num_nodes))
            self._agg = SparseOperand(mat.tocsr())
        return self._agg

    def checksum(self) -> str:
        lines = sorted(f"{s},{d},{w!r}" for s, d, w in
                       zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()))
        payload = f"{self.num_nodes};" + ";".join(lines)
        return hashlib.sha256(payload.encode()).hexdigest()

    def topological_order(self):
        """Kahn order over the edges, or raise if the graph has a cycle."""
        remaining = self.in_degree.copy()
        out_lists = [[] for _ in range(self.num_nodes)]
        for s, d in zip(self.src, self.dst):
            out_lists[s].append(d)
        ready = sorted(np.flatnonzero(remaining == 0).tolist())
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for d in sorted(out_lists[n]):
                remaining[d] -= 1
                if remaining[d] == 0:
                    ready.append(d)
        if len(order) != self.num_nodes:
            raise GraphError("graph contains a cycle")
        return order


# ---------------------------------------------------------------------------
# spatial graph builders


def project_lat_lon(lat_deg, lon_deg):
    """Equirectangular projection of degree coordinates to planar (x, y).

    Uses unit radius and the mean latitude as the standard parallel; any
    global scale cancels in the distance-kernel edge weights.
    """
    lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
    lon = np.radians(np.asarray(lon_deg, dtype=np.float64))
    x = lon * np.cos(lat.mean())
    y = lat
    return np.stack([x, y], axis=1)


def build_knn_graph(positions, k: int) -> GraphTopology:
    """Connect every node to its k nearest Euclidean neighbors (as parents).

    The edge (m, n) gets weight exp(-(d_mn / (4 sigma))^2) where sigma is the
    standard deviation of the distances over all created edges, so the
    nearest pairs get weights near 1 and the farthest near 0. Distance ties
    break toward the smaller node index. If every edge distance is equal
    (sigma = 0) all weights are 1.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise GraphError("positions must be (n, 2)")
    if n < k + 1:
        raise GraphError(f"need at least k+1 = {k + 1} points, got {n}")
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    src, dst, edge_dist = [], [], []
    for node in range(n):
        nearest = np.argsort(dist[node], kind="stable")[:k]
        for m in nearest:
            src.append(int(m))
            dst.append(node)
            edge_dist.append(dist[node, m])
    edge_dist = np.array(edge_dist)
    sigma = edge_dist.std()
    if sigma == 0.0:
        weight = np.ones_like(edge_dist)
    else:
        weight = np.exp(-((edge_dist / (4.0 * sigma)) ** 2))
    return GraphTopology(n, src, dst, weight)


def _circumcircle_contains(a, b, c, p) -> bool:
    """True if p lies strictly inside the circumcircle of triangle (a, b, c)."""
    orient = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    ax, ay = a[0] - p[0], a[1] - p[1]
    bx, by = b[0] - p[0], b[1] - p[1]
    cx, cy = c[0] - p[0], c[1] - p[1]
    det = ((ax * ax + ay * ay) * (bx * cy - cx * by)
           - (bx * bx + by * by) * (ax * cy - cx * ay)
           + (cx * cx + cy * cy) * (ax * by - bx * ay))
    return det > 0 if orient > 0 else det < 0


def delaunay_triangles(positions):
    """Delaunay triangulation by incremental insertion (Bowyer-Watson).

    Returns triangles as sorted index triples. Assumes points in general
    position; degenerate inputs (all collinear, exact duplicates) raise with
    a hint to resample.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if n < 3:
        raise GraphError("need at least 3 points to triangulate")
    center = pos.mean(axis=0)
    span = max(np.ptp(pos[:, 0]), np.ptp(pos[:, 1]), 1e-12)
    big = 30.0 * span
    verts = np.vstack([
        pos,
        center + [-big, -big],
        center + [big, -big],
        center + [0.0, big],
    ])
    s1, s2, s3 = n, n + 1, n + 2
    triangles = [(s1, s2, s3)]
    for p in range(n):
        bad = [t for t in triangles
               if _circumcircle_contains(verts[t[0]], verts[t[1]], verts[t[2]], verts[p])]
        if not bad:
            raise GraphError("degenerate point configuration (duplicate or collinear "
                             "points); resample the positions")
        edge_count = {}
        for t in bad:
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(e), max(e))
                edge_count[key] = edge_count.get(key, 0) + 1
        boundary = [e for e, cnt in edge_count.items() if cnt == 1]
        triangles = [t for t in triangles if t not in bad]
        for u, v in boundary:
            triangles.append((u, v, p))
    result = sorted(tuple(sorted(t)) for t in triangles
                    if s1 not in t and s2 not in t and s3 not in t)
    covered = {v for t in result for v in t}
    if len(covered) != n:
        raise GraphError("degenerate point configuration (collinear points?); "
                         "resample the positions")
    return result


def delaunay_edges(positions):
    """Undirected Delaunay edge set as sorted (u, v) pairs with u < v."""
    edges = set()
    for a, b, c in delaunay_triangles(positions):
        edges.update([(a, b), (b, c), (a, c)])
    return sorted(edges)


def build_delaunay_dag(positions, node_order) -> GraphTopology:
    """Orient Delaunay edges along ``node_order`` to obtain an acyclic graph.

    Each undirected edge {u, v} becomes u -> v when u comes before v in the
    ordering; all weights are 1.
    """
    pos = np.asarray(positions, dtype=np.float64)
    order = np.asarray(node_order, dtype=np.intp)
    if sorted(order.tolist()) != list(range(len(pos))):
        raise GraphError("node_order must be a permutation of all node ids")
    rank = np.empty(len(pos), dtype=np.intp)
    rank[order] = np.arange(len(pos))
    src, dst = [], []
    for u, v in delaunay_edges(pos):
        if rank[u] < rank[v]:
            src.append(u)
            dst.append(v)
        else:
            src.append(v)
            dst.append(u)
    g = GraphTopology(len(pos), src, dst, np.ones(len(src)))
    g.topological_order()  # construction guarantees acyclicity; fail loudly if not
    return g


# ---------------------------------------------------------------------------
# edge-list persistence


def save_edge_csv(graph: GraphTopology, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["src", "dst", "weight"])
        for s, d, w in zip(graph.src.tolist(), graph.dst.tolist(), graph.weight.tolist()):
            writer.writerow([s, d, repr(w)])


def load_edge_csv(path, num_nodes=None, keep_largest_component=False):
    """Load a ``src,dst,weight`` edge list with zero-based node ids.

    With ``keep_largest_component`` the graph is restricted to the largest
    weakly connected component (ids remapped to be contiguous) and the kept
    original ids are returned alongside. Weak connectivity is used because
    the aggregation only needs information to be able to flow, not a cycle.
    """
    src, dst, weight = [], [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["src", "dst", "weight"]:
            raise GraphError(f"{path}: expected header src,dst,weight, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise GraphError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                s, d, w = int(row[0]), int(row[1]), float(row[2])
            except ValueError as err:
                raise GraphError(f"{path}:{lineno}: {err}") from None
            src.append(s)
            dst.append(d)
            weight.append(w)
    if num_nodes is None:
        num_nodes = max(max(src, default=-1), max(dst, default=-1)) + 1
    graph = GraphTopology(num_nodes, src, dst, weight)
    if not keep_largest_component:
        return graph
    adj = scipy.sparse.coo_matrix(
        (np.ones(graph.num_edges), (graph.src, graph.dst)),
        shape=(num_nodes, num_nodes))
    n_comp, labels = scipy.sparse.csgraph.connected_components(adj, directed=False)
    counts = np.bincount(labels, minlength=n_comp)
    keep_label = int(np.flatnonzero(counts == counts.max())[0])
    kept = np.flatnonzero(labels == keep_label)
    remap = -np.ones(num_nodes, dtype=np.intp)
    remap[kept] = np.arange(len(kept))
    mask = (remap[graph.src] >= 0) & (remap[graph.dst] >= 0)
    sub = GraphTopology(len(kept), remap[graph.src[mask]], remap[graph.dst[mask]],
                        graph.weight[mask])
    return sub, kept
