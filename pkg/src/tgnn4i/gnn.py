"""Graph message-passing layers used inside the recurrent cell and the
predictive head.

One layer maps node features X (one row per node) to

    out[n] = W_self x_n + (1 / |N(n)|) * sum over parents m of e_{m,n} W_neigh x_m

with both matrices shared across nodes. The weighted neighbor average is a
constant linear operator of the graph, so it is applied as a sparse matrix
product before the (shared) neighbor transform; by linearity this equals
transforming each neighbor first. Nodes without parents get only the self
term. Stacks apply ReLU between layers and nothing after the last one.

Features are row vectors here, so weights are stored transposed as
(d_in, d_out) and applied as ``x @ w``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import SparseOperand, Tensor
from .graph import GraphTopology


def init_weight(rng, d_in: int, d_out: int) -> Tensor:
    """Uniform in +-1/sqrt(fan-in), the usual default for linear maps."""
    bound = 1.0 / np.sqrt(d_in)
    return ad.parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))


class GnnLayer:
    """One message-passing layer; both matrices are stored (d_in, d_out)."""

    def __init__(self, w_self: Tensor, w_neigh: Tensor):
        if w_self.values.shape != w_neigh.values.shape:
            raise ad.ShapeError("gnn layer matrices must share their shape")
        self.w_self = w_self
        self.w_neigh = w_neigh

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "GnnLayer":
        return cls(init_weight(rng, d_in, d_out), init_weight(rng, d_in, d_out))

    @property
    def d_in(self) -> int:
        return self.w_self.values.shape[0]

    @property
    def d_out(self) -> int:
        return self.w_self.values.shape[1]

    def apply(self, x: Tensor, agg: SparseOperand, rows=None) -> Tensor:
        """Forward over all nodes, or only the given rows of the output."""
        neigh = ad.spmm(agg, x)
        if rows is not None:
            x = ad.gather_rows(x, rows, unique=True)
            neigh = ad.gather_rows(neigh, rows, unique=True)
        return ad.add(ad.matmul(x, self.w_self), ad.matmul(neigh, self.w_neigh))

    def parameters(self):
        return [self.w_self, self.w_neigh]


class GnnStack:
    """Sequence of message-passing layers with ReLU in between."""

    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ad.ShapeError(f"stack dimensions do not chain: {a.d_out} -> {b.d_in}")

    @classmethod
    def init(cls, rng, dims) -> "GnnStack":
        return cls([GnnLayer.init(rng, d_in, d_out) for d_in, d_out in zip(dims, dims[1:])])

    def apply(self, x: Tensor, agg: SparseOperand, rows=None) -> Tensor:
        """Forward through all layers; ``rows`` restricts only the last one."""
        for layer in self.layers[:-1]:
            x = ad.relu(layer.apply(x, agg))
        return self.layers[-1].apply(x, agg, rows=rows)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class FcLayer:
    """Per-node fully connected layer with bias; weight stored (d_in, d_out)."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "FcLayer":
        return cls(init_weight(rng, d_in, d_out), ad.parameter(np.zeros(d_out)))

    def apply(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class FcStack:
    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def init(cls, rng, dims) -> "FcStack":
        return cls([FcLayer.init(rng, d_in, d_out) for d_in, d_out in zip(dims, dims[1:])])

    def apply(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer.apply(x))
        return self.layers[-1].apply(x)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


# ---------------------------------------------------------------------------
# plain-graph entry points


def _check_features(node_features, graph: GraphTopology) -> Tensor:
    x = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
    if x.values.ndim != 2 or x.values.shape[0] != graph.num_nodes:
        raise ad.ShapeError(f"features shape {x.values.shape} does not match "
                            f"{graph.num_nodes} nodes")
    return x


def gnn_layer_apply(layer: GnnLayer, node_features, graph: GraphTopology) -> Tensor:
    return layer.apply(_check_features(node_features, graph), graph.aggregation())


def gnn_stack_apply(stack: GnnStack, node_features, graph: GraphTopology) -> Tensor:
    return stack.apply(_check_features(node_features, graph), graph.aggregation())
