"""World -> network input: the n-nearest graph and the flat nearest-agents vector.

Features per vehicle are ``(x, y, v_x, v_y, delta)`` with ``x`` measured from
the ego along the road, ``y`` the lateral road coordinate (right-lane center = 0),
velocities in road axes and ``delta`` the steering angle.  Scales:
``x / position_scale``, ``y / lateral_scale``, ``v / velocity_scale``,
``delta / steer_scale``.  The steering angle is part of the state because the
action is a steering *rate*; without it no memoryless policy can damp the
lateral dynamics.  Edge values are to-node minus from-node positions in
the same scaled coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .sim import EGO, WorldState


FEATURE_DIM = 5


@dataclass(frozen=True)
class ObserverConfig:
    n_near: int = 3
    r_near: float = 50.0
    noise_stddev: float = 0.0
    max_agents_flat: int = 4
    position_scale: float = 50.0
    lateral_scale: float = 3.5
    velocity_scale: float = 15.0
    steer_scale: float = 0.2

    def __post_init__(self) -> None:
        if self.n_near < 1 or self.r_near <= 0 or self.noise_stddev < 0:
            raise ConfigError(f"invalid observer config {self}")
        if self.max_agents_flat < 1:
            raise ConfigError("max_agents_flat must be >= 1")
        if min(self.position_scale, self.lateral_scale, self.velocity_scale, self.steer_scale) <= 0:
            raise ConfigError("feature scales must be positive")

    @property
    def flat_dim(self) -> int:
        return FEATURE_DIM * self.max_agents_flat


@dataclass
class ObservationGraph:
    node_values: np.ndarray  # (N, FEATURE_DIM)
    src: np.ndarray  # (E,) from-node index
    dst: np.ndarray  # (E,) to-node index
    edge_values: np.ndarray  # (E, 2)
    ego_index: int
    node_ids: np.ndarray  # (N,) vehicle ids, for debugging and tests

    @property
    def num_nodes(self) -> int:
        return self.node_values.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]

    def edge_set(self) -> set[tuple[int, int]]:
        """Edges as (from vehicle id, to vehicle id)."""
        ids = self.node_ids
        return {(int(ids[i]), int(ids[j])) for i, j in zip(self.src, self.dst)}

    def to_json(self) -> str:
        return json.dumps(
            {
                "ego_index": int(self.ego_index),
                "nodes": [
                    {"index": i, "vehicle_id": int(vid), "value": [float(q) for q in row]}
                    for i, (vid, row) in enumerate(zip(self.node_ids, self.node_values))
                ],
                "edges": [
                    {"from": int(i), "to": int(j), "value": [float(q) for q in e]}
                    for i, j, e in zip(self.src, self.dst, self.edge_values)
                ],
            },
            indent=2,
        )


@dataclass
class GraphBatch:
    """Disjoint union of graphs; node indices are global within the batch."""

    node_values: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_values: np.ndarray
    ego_index: np.ndarray  # (B,)

    @property
    def num_nodes(self) -> int:
        return self.node_values.shape[0]

    @property
    def num_graphs(self) -> int:
        return self.ego_index.shape[0]


def batch_graphs(graphs: list[ObservationGraph]) -> GraphBatch:
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    nodes = np.concatenate([g.node_values for g in graphs], axis=0)
    src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)]).astype(np.int64)
    dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]).astype(np.int64)
    edges = np.concatenate([g.edge_values for g in graphs], axis=0).reshape(-1, 2)
    ego = np.array([g.ego_index + o for g, o in zip(graphs, offsets[:-1])], dtype=np.int64)
    return GraphBatch(nodes, src, dst, edges, ego)


def perturb_distances(true_distances, noise_stddev: float, rng: np.random.Generator | None) -> np.ndarray:
    """Add independent N(0, noise_stddev^2) draws, clamped at zero.

    With ``noise_stddev == 0`` the input is returned unchanged and ``rng`` is
    not touched.
    """
    d = np.asarray(true_distances, dtype=np.float64)
    if noise_stddev < 0:
        raise ConfigError("noise_stddev must be >= 0")
    if noise_stddev == 0:
        return d.copy()
    return np.maximum(d + rng.normal(0.0, noise_stddev, size=d.shape), 0.0)


def _features(world: WorldState, cfg: ObserverConfig):
    ego = world.ego.state
    ids = np.array([v.id for v in world.vehicles], dtype=np.int64)
    pos = np.array([(v.state.x, v.state.y) for v in world.vehicles], dtype=np.float64)
    vel = np.array([(v.state.vx, v.state.vy) for v in world.vehicles], dtype=np.float64)
    delta = np.array([v.state.delta for v in world.vehicles], dtype=np.float64)
    scaled = np.empty((len(ids), FEATURE_DIM))
    scaled[:, 0] = (pos[:, 0] - ego.x) / cfg.position_scale
    scaled[:, 1] = pos[:, 1] / cfg.lateral_scale
    scaled[:, 2:4] = vel / cfg.velocity_scale
    scaled[:, 4] = delta / cfg.steer_scale
    is_ego = np.array([v.controller == EGO for v in world.vehicles])
    return ids, pos, scaled, is_ego


def observe_graph(
    world: WorldState, cfg: ObserverConfig, rng: np.random.Generator | None = None
) -> ObservationGraph:
    """Directed graph linking every in-range vehicle to its ``n_near`` nearest.

    Membership uses true distances; neighbour choice uses (possibly noisy)
    distances, ties broken by ascending vehicle id.
    """
    ids, pos, scaled, is_ego = _features(world, cfg)
    ego_pos = pos[is_ego][0]
    keep = np.hypot(*(pos - ego_pos).T) <= cfg.r_near
    keep |= is_ego
    ids, pos, scaled, is_ego = ids[keep], pos[keep], scaled[keep], is_ego[keep]
    n = len(ids)
    ego_index = int(np.flatnonzero(is_ego)[0])

    k = min(cfg.n_near, n - 1)
    src, dst = [], []
    if k > 0:
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        dist = perturb_distances(dist, cfg.noise_stddev, rng)
        for i in range(n):
            others = np.flatnonzero(np.arange(n) != i)
            order = np.lexsort((ids[others], dist[i, others]))
            for j in others[order[:k]]:
                src.append(i)
                dst.append(j)
    src = np.array(src, dtype=np.int64)
    dst = np.array(dst, dtype=np.int64)
    edge_values = (scaled[dst, :2] - scaled[src, :2]).reshape(-1, 2)
    return ObservationGraph(scaled, src, dst, edge_values, ego_index, ids)


def nearest_order(
    world: WorldState, cfg: ObserverConfig, rng: np.random.Generator | None = None
) -> list[int]:
    """Vehicle ids in the flat observation, ego first."""
    ids, pos, _, is_ego = _features(world, cfg)
    ego_pos = pos[is_ego][0]
    true_d = np.hypot(*(pos - ego_pos).T)
    cand = np.flatnonzero(~is_ego & (true_d <= cfg.r_near))
    d = perturb_distances(true_d[cand], cfg.noise_stddev, rng)
    order = cand[np.lexsort((ids[cand], d))][: cfg.max_agents_flat - 1]
    return [int(ids[is_ego][0])] + [int(ids[i]) for i in order]


def observe_flat(
    world: WorldState, cfg: ObserverConfig, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Ego features followed by the nearest in-range vehicles, zero-padded."""
    ids, _, scaled, _ = _features(world, cfg)
    row_of = {int(v): i for i, v in enumerate(ids)}
    out = np.zeros(cfg.flat_dim)
    for slot, vid in enumerate(nearest_order(world, cfg, rng)):
        out[FEATURE_DIM * slot: FEATURE_DIM * (slot + 1)] = scaled[row_of[vid]]
    return out
