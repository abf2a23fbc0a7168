import itertools

import numpy as np
import pytest

from lanegnn.errors import ConfigError
from lanegnn.gnn import (
    EDGE_DIM,
    NODE_DIM,
    GnnLayerParams,
    GnnParams,
    gnn_backward,
    gnn_forward,
    gnn_layer_forward,
    init_gnn,
)
from lanegnn.observers import ObservationGraph, batch_graphs
from lanegnn.tensor import Activation, DenseLayer, GradTape, ParameterStore

from builders import random_graph
from oracles import finite_difference_check, gnn_layer_loops


def off():
    return GradTape(enabled=False)


def with_random_bias(params: GnnParams, rng) -> GnnParams:
    for layer in params.dense_layers():
        layer.bias[:] = rng.normal(scale=0.2, size=layer.bias.shape)
    return params


def graph(nodes, edges, edge_values=None, ego=0):
    nodes = np.asarray(nodes, dtype=np.float64)
    src = np.array([i for i, _ in edges], dtype=np.int64)
    dst = np.array([j for _, j in edges], dtype=np.int64)
    ev = np.zeros((len(edges), 2)) if edge_values is None else np.asarray(edge_values, float)
    return ObservationGraph(nodes, src, dst, ev, ego, np.arange(len(nodes)))


def identity_layer(n_in, n_out, name):
    w = np.zeros((n_out, n_in))
    return DenseLayer(w, np.zeros(n_out), Activation.IDENTITY, name)


def test_node_without_incoming_edges_aggregates_zero():
    rng = np.random.default_rng(0)
    layer = init_gnn(rng, depth=1, hidden=6).layers[0]
    h = rng.normal(size=(2, NODE_DIM))
    src, dst = np.array([0]), np.array([1])
    new_h, _ = gnn_layer_forward(h, np.ones((1, 2)), src, dst, layer, off())
    zero_agg = np.concatenate([np.zeros(6), h[0]])
    expected = np.maximum(layer.node_net.weights @ zero_agg + layer.node_net.bias, 0.0)
    np.testing.assert_allclose(new_h.value[0], expected, atol=1e-15)


def test_sum_aggregation_of_two_incoming_edges():
    # edge_net copies the edge value into its output, node_net copies the aggregate
    edge_net = identity_layer(2 * NODE_DIM + EDGE_DIM, 2, "e")
    edge_net.weights[0, NODE_DIM] = 1.0
    edge_net.weights[1, NODE_DIM + 1] = 1.0
    node_net = identity_layer(2 + NODE_DIM, 2, "n")
    node_net.weights[0, 0] = node_net.weights[1, 1] = 1.0
    layer = GnnLayerParams(edge_net, node_net)
    g = graph(np.zeros((3, NODE_DIM)), [(1, 0), (2, 0)], [[1.0, 2.0], [3.0, 4.0]])
    new_h, _ = gnn_layer_forward(g.node_values, g.edge_values, g.src, g.dst, layer, off())
    np.testing.assert_array_equal(new_h.value[0], [4.0, 6.0])
    np.testing.assert_array_equal(new_h.value[1], [0.0, 0.0])


@pytest.mark.parametrize("seed", range(8))
def test_layer_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(1, 7)))
    layer = with_random_bias(init_gnn(rng, depth=1, hidden=5), rng).layers[0]
    new_h, new_e = gnn_layer_forward(g.node_values, g.edge_values, g.src, g.dst, layer, off())
    ref_h, ref_e = gnn_layer_loops(layer, g.node_values.tolist(), g.edge_values.tolist(),
                                   list(zip(g.src.tolist(), g.dst.tolist())))
    np.testing.assert_allclose(new_h.value, ref_h, atol=1e-12)
    if g.num_edges:
        np.testing.assert_allclose(new_e.value, ref_e, atol=1e-12)


def test_full_forward_matches_stacked_oracle():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 5)
    params = with_random_bias(init_gnn(rng, depth=3, hidden=7), rng)
    h, e = g.node_values.tolist(), g.edge_values.tolist()
    edges = list(zip(g.src.tolist(), g.dst.tolist()))
    for layer in params.layers:
        h, e = gnn_layer_loops(layer, h, e, edges)
    out = gnn_forward(g, params, off()).value
    np.testing.assert_allclose(out[0], h[g.ego_index], atol=1e-12)


def relabel(g: ObservationGraph, perm: np.ndarray) -> ObservationGraph:
    """Node ``i`` of ``g`` becomes node ``perm[i]``."""
    inv = np.argsort(perm)
    return ObservationGraph(g.node_values[inv], perm[g.src], perm[g.dst], g.edge_values.copy(),
                            int(perm[g.ego_index]), g.node_ids[inv])


def test_all_relabelings_of_four_node_graph_agree():
    rng = np.random.default_rng(12)
    g = graph(rng.normal(size=(4, NODE_DIM)),
              [(0, 1), (1, 0), (1, 2), (2, 3), (3, 0), (2, 0), (3, 1)],
              rng.normal(size=(7, 2)))
    params = with_random_bias(init_gnn(rng), rng)
    base = gnn_forward(g, params, off()).value
    for perm in itertools.permutations(range(4)):
        out = gnn_forward(relabel(g, np.array(perm)), params, off()).value
        np.testing.assert_allclose(out, base, atol=1e-9, rtol=0)


def test_edge_order_does_not_matter():
    rng = np.random.default_rng(13)
    g = random_graph(rng, 6)
    params = init_gnn(rng)
    order = rng.permutation(g.num_edges)
    shuffled = ObservationGraph(g.node_values, g.src[order], g.dst[order],
                                g.edge_values[order], g.ego_index, g.node_ids)
    np.testing.assert_allclose(gnn_forward(shuffled, params, off()).value,
                               gnn_forward(g, params, off()).value, atol=1e-9, rtol=0)


def hops_to_ego(g: ObservationGraph) -> dict[int, int]:
    """Length of the shortest directed path from each node to the ego."""
    dist = {g.ego_index: 0}
    frontier = [g.ego_index]
    while frontier:
        nxt = []
        for node in frontier:
            for i, j in zip(g.src, g.dst):
                if j == node and int(i) not in dist:
                    dist[int(i)] = dist[node] + 1
                    nxt.append(int(i))
        frontier = nxt
    return dist


def test_chain_locality_bit_identical():
    # chain 4 -> 3 -> 2 -> 1 -> 0 (ego); node 4 is 4 hops away
    rng = np.random.default_rng(2)
    edges = [(4, 3), (3, 2), (2, 1), (1, 0)]
    g = graph(rng.normal(size=(5, NODE_DIM)), edges, rng.normal(size=(4, 2)))
    params = init_gnn(rng)
    base = gnn_forward(g, params, off()).value
    far = graph(g.node_values.copy(), edges, g.edge_values.copy())
    far.node_values[4] += 10.0
    assert np.array_equal(gnn_forward(far, params, off()).value, base)
    near = graph(g.node_values.copy(), edges, g.edge_values.copy())
    near.node_values[3] += 10.0
    assert not np.array_equal(gnn_forward(near, params, off()).value, base)


@pytest.mark.parametrize("seed", range(10))
def test_random_graph_locality(seed):
    rng = np.random.default_rng(50 + seed)
    g = random_graph(rng, 9, max_out=2)
    params = init_gnn(rng, hidden=16)
    base = gnn_forward(g, params, off()).value
    hops = hops_to_ego(g)
    for node in range(g.num_nodes):
        if hops.get(node, 99) > 3:
            mod = ObservationGraph(g.node_values.copy(), g.src, g.dst, g.edge_values,
                                   g.ego_index, g.node_ids)
            mod.node_values[node] = rng.normal(size=NODE_DIM) * 5
            assert np.array_equal(gnn_forward(mod, params, off()).value, base)


def gnn_fd_check(seed, n_nodes, hidden):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n_nodes)
    params = with_random_bias(init_gnn(rng, depth=3, hidden=hidden), rng)
    store = ParameterStore()
    store.add_layers(params.dense_layers())
    w_out = rng.normal(size=(1, hidden))

    def loss():
        return float(np.sum(gnn_forward(g, params, off()).value * w_out))

    tape = GradTape()
    gnn_forward(g, params, tape)
    grads = gnn_backward(tape, w_out).params
    return finite_difference_check(loss, store.params, grads), store.num_scalars()


@pytest.mark.parametrize("seed", range(4))
def test_gnn_parameter_gradients_match_finite_differences(seed):
    (failures, checked), total = gnn_fd_check(seed, 3 + seed, hidden=5)
    assert checked == total
    assert not failures, failures[:5]


def test_feature_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    g = random_graph(rng, 5)
    params = with_random_bias(init_gnn(rng, hidden=6), rng)
    w_out = rng.normal(size=(1, 6))
    tape = GradTape()
    h = tape.leaf(g.node_values)
    e = tape.leaf(g.edge_values)
    gnn_forward(g, params, tape, inputs=(h, e))
    grads = gnn_backward(tape, w_out)

    def loss():
        return float(np.sum(gnn_forward(g, params, off()).value * w_out))

    failures, _ = finite_difference_check(
        loss, {"h": g.node_values, "e": g.edge_values}, {"h": grads.wrt(h), "e": grads.wrt(e)})
    assert not failures, failures[:5]


def test_hand_chain_rule_on_two_node_scalar_layer():
    # one edge 1 -> 0, all widths 1 after the first layer's inputs
    edge_net = DenseLayer(np.zeros((1, 2 * NODE_DIM + EDGE_DIM)), np.array([0.0]),
                          Activation.RELU, "e")
    edge_net.weights[0, NODE_DIM] = 2.0  # picks up the edge value
    node_net = DenseLayer(np.zeros((1, 1 + NODE_DIM)), np.array([0.5]), Activation.RELU, "n")
    node_net.weights[0, 0] = 3.0  # scales the aggregate
    params = GnnParams([GnnLayerParams(edge_net, node_net)])
    g = graph(np.zeros((2, NODE_DIM)), [(1, 0)], [[1.5, 0.0]])
    tape = GradTape()
    out = gnn_forward(g, params, tape)
    # e' = relu(2 * 1.5) = 3, h' = relu(3 * 3 + 0.5) = 9.5
    assert out.value[0, 0] == 9.5
    grads = gnn_backward(tape, np.ones((1, 1))).params
    assert grads["n/bias"][0] == 1.0
    assert grads["n/weights"][0, 0] == 3.0  # d h'/d w_agg = agg
    assert grads["e/weights"][0, NODE_DIM] == 3.0 * 1.5  # w_agg * edge value
    assert grads["e/bias"][0] == 3.0


def test_batched_forward_equals_per_graph():
    rng = np.random.default_rng(21)
    gs = [random_graph(rng, n) for n in (1, 3, 6, 2)]
    params = init_gnn(rng, hidden=9)
    batched = gnn_forward(batch_graphs(gs), params, off()).value
    single = np.vstack([gnn_forward(g, params, off()).value for g in gs])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def test_layer_dimension_mismatch_rejected():
    rng = np.random.default_rng(0)
    a = init_gnn(rng, depth=1, hidden=4).layers[0]
    b = init_gnn(rng, depth=1, hidden=5).layers[0]
    with pytest.raises(ConfigError):
        GnnParams([a, b])
    with pytest.raises(ConfigError):
        GnnParams([])


def test_empty_graph_rejected():
    rng = np.random.default_rng(0)
    g = ObservationGraph(np.zeros((0, NODE_DIM)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                         np.zeros((0, 2)), 0, np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        gnn_forward(g, init_gnn(rng), off())


def test_parameter_names_and_count():
    params = init_gnn(np.random.default_rng(0), depth=3, hidden=80, name="actor/gnn")
    store = ParameterStore()
    store.add_layers(params.dense_layers())
    assert "actor/gnn/layer2/node_net/weights" in store.params
    first = (2 * NODE_DIM + EDGE_DIM) * 80 + 80 + (80 + NODE_DIM) * 80 + 80
    later = (3 * 80) * 80 + 80 + (2 * 80) * 80 + 80
    assert store.num_scalars() == first + 2 * later
