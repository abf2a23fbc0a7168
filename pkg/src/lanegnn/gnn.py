"""Edge-conditioned message passing with sum aggregation and ego readout.

Each layer computes, in order::

    e'_ij  = edge_net([h_i, e_ij, h_j])         for every edge i -> j
    agg_j  = sum of e'_ij over incoming edges  (zero when there are none)
    h'_j   = node_net([agg_j, h_j])

There is no global block.  Layer 1 consumes the raw node and 2-d edge
features directly; later layers see hidden-width values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .observers import FEATURE_DIM, GraphBatch, ObservationGraph, batch_graphs
from .tensor import (
    Activation,
    DenseLayer,
    GradTape,
    Gradients,
    Var,
    backward,
    concat,
    dense_forward,
    gather_rows,
    init_dense,
    pair_dense,
    segment_sum,
)

NODE_DIM = FEATURE_DIM
EDGE_DIM = 2


@dataclass
class GnnLayerParams:
    edge_net: DenseLayer
    node_net: DenseLayer


@dataclass
class GnnParams:
    layers: list[GnnLayerParams]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("a GNN needs at least one layer")
        node_dim, edge_dim = NODE_DIM, EDGE_DIM
        for k, layer in enumerate(self.layers):
            if layer.edge_net.in_dim != 2 * node_dim + edge_dim:
                raise ConfigError(f"layer {k}: edge_net expects {layer.edge_net.in_dim} inputs, "
                                  f"graph provides {2 * node_dim + edge_dim}")
            if layer.node_net.in_dim != layer.edge_net.out_dim + node_dim:
                raise ConfigError(f"layer {k}: node_net input width mismatch")
            node_dim, edge_dim = layer.node_net.out_dim, layer.edge_net.out_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].node_net.out_dim

    def dense_layers(self) -> list[DenseLayer]:
        return [d for layer in self.layers for d in (layer.edge_net, layer.node_net)]


def init_gnn(
    rng: np.random.Generator,
    depth: int = 3,
    hidden: int = 80,
    name: str = "gnn",
    activation: Activation = Activation.RELU,
) -> GnnParams:
    layers = []
    node_dim, edge_dim = NODE_DIM, EDGE_DIM
    for k in range(depth):
        edge_net = init_dense(2 * node_dim + edge_dim, hidden, rng, activation,
                              f"{name}/layer{k}/edge_net")
        node_net = init_dense(hidden + node_dim, hidden, rng, activation,
                              f"{name}/layer{k}/node_net")
        layers.append(GnnLayerParams(edge_net, node_net))
        node_dim, edge_dim = hidden, hidden
    return GnnParams(layers)


def gnn_layer_forward(
    h, e, src: np.ndarray, dst: np.ndarray, params: GnnLayerParams, tape: GradTape
) -> tuple[Var, Var]:
    """One round of edge update, incoming-edge sum and node update."""
    if not isinstance(h, Var):
        h = tape.leaf(h)
    if not isinstance(e, Var):
        width = params.edge_net.in_dim - 2 * h.value.shape[1]
        e = tape.leaf(np.asarray(e, dtype=np.float64).reshape(len(src), width))
    n = h.value.shape[0]
    e_new = pair_dense(params.edge_net, h, e, src, dst, tape)
    agg = segment_sum(e_new, dst, n, tape)
    h_new = dense_forward(params.node_net, concat([agg, h], tape), tape)
    return h_new, e_new


def gnn_forward(graph: ObservationGraph | GraphBatch, params: GnnParams, tape: GradTape,
                inputs: tuple[Var, Var] | None = None) -> Var:
    """Ego-node embedding after all layers, one row per graph.

    ``inputs`` optionally supplies pre-registered node/edge leaves so callers
    can read feature gradients after :func:`gnn_backward`.
    """
    if isinstance(graph, ObservationGraph):
        graph = batch_graphs([graph])
    if graph.num_nodes == 0:
        raise ValueError("empty graph")
    if inputs is None:
        h = tape.leaf(graph.node_values)
        e = tape.leaf(graph.edge_values.reshape(-1, EDGE_DIM))
    else:
        h, e = inputs
    for layer in params.layers:
        h, e = gnn_layer_forward(h, e, graph.src, graph.dst, layer, tape)
    return gather_rows(h, graph.ego_index, tape)


def gnn_backward(tape: GradTape, ego_grad: np.ndarray) -> Gradients:
    """Reverse sweep of a tape whose last op is the ego readout."""
    return backward(tape, ego_grad)
