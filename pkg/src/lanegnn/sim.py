"""Straight multi-lane highway with a single-track ego vehicle and IDM traffic.

Lane ``k`` has its center line at ``y = k * lane_width``; lane 0 is the right
lane.  The road spans ``0 <= x <= length``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, InvariantError, ScenarioError, UsageError

EGO = "ego"
IDM = "idm"


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float
    delta: float = 0.0
    lane_id: int = 0

    @property
    def vx(self) -> float:
        return self.v * math.cos(self.theta)

    @property
    def vy(self) -> float:
        return self.v * math.sin(self.theta)


@dataclass(frozen=True)
class Control:
    accel: float = 0.0
    steer_rate: float = 0.0


@dataclass(frozen=True)
class ControlBounds:
    accel: tuple[float, float] = (-5.0, 4.0)
    steer_rate: tuple[float, float] = (-0.2, 0.2)
    delta_max: float = 0.2

    def as_array(self) -> np.ndarray:
        """Rows in action order: (steer_rate, accel)."""
        return np.array([self.steer_rate, self.accel], dtype=np.float64)

    def clamp(self, u: Control) -> Control:
        return Control(
            min(max(u.accel, self.accel[0]), self.accel[1]),
            min(max(u.steer_rate, self.steer_rate[0]), self.steer_rate[1]),
        )

    def contains(self, u: Control, tol: float = 1e-12) -> bool:
        return (
            self.accel[0] - tol <= u.accel <= self.accel[1] + tol
            and self.steer_rate[0] - tol <= u.steer_rate <= self.steer_rate[1] + tol
        )


@dataclass(frozen=True)
class RoadConfig:
    lane_width: float = 3.5
    num_lanes: int = 2
    length: float = 200.0
    wheelbase: float = 2.7
    dt: float = 0.2

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.wheelbase <= 0 or self.num_lanes < 2:
            raise ConfigError(f"invalid road config {self}")
        if self.lane_width <= 0 or self.length <= 0:
            raise ConfigError(f"invalid road config {self}")

    def lane_center(self, lane: int) -> float:
        return lane * self.lane_width

    @property
    def y_min(self) -> float:
        return -0.5 * self.lane_width

    @property
    def y_max(self) -> float:
        return (self.num_lanes - 0.5) * self.lane_width


@dataclass(frozen=True)
class IdmParams:
    v0: float = 13.9
    T: float = 1.5
    s0: float = 2.0
    a_idm: float = 1.4
    b: float = 2.0
    b_emergency: float = 8.0

    def __post_init__(self) -> None:
        if min(self.v0, self.T, self.s0, self.a_idm, self.b, self.b_emergency) <= 0:
            raise ConfigError(f"IDM parameters must be positive: {self}")


@dataclass(frozen=True)
class LaneKeepingGains:
    k_y: float = 0.1
    k_theta: float = 1.0
    k_delta: float = 4.0


@dataclass(frozen=True)
class ScenarioConfig:
    road: RoadConfig = field(default_factory=RoadConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    bounds: ControlBounds = field(default_factory=ControlBounds)
    lane_keeping: LaneKeepingGains = field(default_factory=LaneKeepingGains)
    vehicle_length: float = 4.8
    vehicle_width: float = 1.8
    num_vehicles: tuple[int, int] = (4, 12)
    speed_range: tuple[float, float] = (10.0, 15.0)
    min_gap: float = 10.0
    ego_x_range: tuple[float, float] = (10.0, 40.0)
    ego_lane: int = 0
    goal_lane: int = 1
    goal_x_range: tuple[float, float] = (40.0, 190.0)
    max_attempts: int = 1000

    def __post_init__(self) -> None:
        lo, hi = self.num_vehicles
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad vehicle-count range {self.num_vehicles}")
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise ConfigError(f"bad speed range {self.speed_range}")
        if self.goal_x_range[1] <= self.goal_x_range[0]:
            raise ConfigError(f"empty goal x-range {self.goal_x_range}")


@dataclass
class Vehicle:
    id: int
    state: VehicleState
    controller: str


@dataclass
class WorldState:
    cfg: ScenarioConfig
    vehicles: list[Vehicle]
    t: float = 0.0
    step_count: int = 0
    seed: int | None = None
    terminal: bool = False

    @property
    def road(self) -> RoadConfig:
        return self.cfg.road

    @property
    def ego(self) -> Vehicle:
        for veh in self.vehicles:
            if veh.controller == EGO:
                return veh
        raise InvariantError("world has no ego vehicle")

    def get(self, vehicle_id: int) -> Vehicle:
        for veh in self.vehicles:
            if veh.id == vehicle_id:
                return veh
        raise KeyError(f"unknown vehicle id {vehicle_id}")

    def copy(self) -> "WorldState":
        return replace(self, vehicles=[Vehicle(v.id, v.state, v.controller) for v in self.vehicles])

    def validate(self) -> None:
        n_ego = sum(v.controller == EGO for v in self.vehicles)
        if n_ego != 1:
            raise InvariantError(f"expected exactly one ego vehicle, found {n_ego}")
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise InvariantError("duplicate vehicle ids")


# ---------------------------------------------------------------- dynamics


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def step_single_track(
    s: VehicleState, u: Control, road: RoadConfig, delta_max: float = 0.2
) -> VehicleState:
    """One explicit Euler step of the kinematic single-track model."""
    vals = (s.x, s.y, s.theta, s.v, s.delta, u.accel, u.steer_rate)
    if not all(math.isfinite(q) for q in vals):
        raise InvariantError(f"non-finite vehicle state or control: {s}, {u}")
    dt = road.dt
    x = s.x + s.v * math.cos(s.theta) * dt
    y = s.y + s.v * math.sin(s.theta) * dt
    theta = wrap_angle(s.theta + s.v / road.wheelbase * math.tan(s.delta) * dt)
    v = max(0.0, s.v + u.accel * dt)
    delta = min(max(s.delta + u.steer_rate * dt, -delta_max), delta_max)
    return VehicleState(x, y, theta, v, delta, s.lane_id)


def idm_accel(ego_v: float, gap: float, lead_v: float, p: IdmParams) -> float:
    """IDM acceleration; pass ``gap=math.inf`` when there is no leader."""
    if not gap > 0.0:
        raise ValueError(f"IDM gap must be positive (got {gap})")
    free = (ego_v / p.v0) ** 4
    if math.isinf(gap):
        interaction = 0.0
    else:
        s_star = p.s0 + max(0.0, ego_v * p.T + ego_v * (ego_v - lead_v) / (2.0 * math.sqrt(p.a_idm * p.b)))
        interaction = (s_star / gap) ** 2
    a = p.a_idm * (1.0 - free - interaction)
    return min(max(a, -p.b_emergency), p.a_idm)


def _occupies_lane(s: VehicleState, lane: int, cfg: ScenarioConfig) -> bool:
    c = cfg.road.lane_center(lane)
    half = 0.5 * cfg.road.lane_width
    return (s.y + 0.5 * cfg.vehicle_width > c - half) and (s.y - 0.5 * cfg.vehicle_width < c + half)


def find_leader(world: WorldState, vehicle: Vehicle) -> Vehicle | None:
    """Nearest vehicle ahead whose footprint overlaps the follower's lane."""
    lane = vehicle.state.lane_id
    best, best_dx = None, math.inf
    for other in world.vehicles:
        if other.id == vehicle.id:
            continue
        dx = other.state.x - vehicle.state.x
        if dx < 0.0 or (dx == 0.0 and other.id < vehicle.id):
            continue
        if dx < best_dx and _occupies_lane(other.state, lane, world.cfg):
            best, best_dx = other, dx
    return best


def idm_to_control(world: WorldState, vehicle_id: int) -> Control:
    """IDM longitudinal control plus proportional lane keeping."""
    veh = world.get(vehicle_id)
    if veh.controller != IDM:
        raise UsageError(f"vehicle {vehicle_id} is not IDM-controlled")
    cfg = world.cfg
    s = veh.state
    leader = find_leader(world, veh)
    if leader is None:
        accel = idm_accel(s.v, math.inf, 0.0, cfg.idm)
    else:
        gap = leader.state.x - s.x - cfg.vehicle_length
        accel = idm_accel(s.v, max(gap, 1e-3), leader.state.v, cfg.idm)
    g = cfg.lane_keeping
    y_err = s.y - cfg.road.lane_center(s.lane_id)
    steer_rate = -g.k_y * y_err - g.k_theta * s.theta - g.k_delta * s.delta
    return cfg.bounds.clamp(Control(accel, steer_rate))


# ---------------------------------------------------------------- scenarios


def generate_scenario(seed: int, cfg: ScenarioConfig) -> WorldState:
    """Sample a world: ego on ``cfg.ego_lane``, traffic on all lanes.

    Vehicles are placed by rejection sampling until every pair is at least
    ``cfg.min_gap`` apart longitudinally.  Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    road = cfg.road
    lo, hi = cfg.num_vehicles
    count = int(rng.integers(lo, hi + 1))
    v_lo, v_hi = cfg.speed_range

    ego_x = float(rng.uniform(*cfg.ego_x_range))
    ego_lane = cfg.ego_lane
    placed = [(ego_x, ego_lane)]
    attempts = 0
    x_max = road.length - cfg.vehicle_length
    while len(placed) < count:
        if attempts >= cfg.max_attempts:
            raise ScenarioError(
                f"placed {len(placed)} of {count} vehicles in {cfg.max_attempts} attempts"
            )
        attempts += 1
        lane = int(rng.integers(0, road.num_lanes))
        x = float(rng.uniform(0.0, x_max))
        if all(abs(x - px) >= cfg.min_gap for px, _ in placed):
            placed.append((x, lane))
    speeds = rng.uniform(v_lo, v_hi, size=count)

    vehicles = []
    for i, ((x, lane), v) in enumerate(zip(placed, speeds)):
        state = VehicleState(x, road.lane_center(lane), 0.0, float(v), 0.0, lane)
        vehicles.append(Vehicle(i, state, EGO if i == 0 else IDM))
    return WorldState(cfg, vehicles, 0.0, 0, seed)


# ---------------------------------------------------------------- collisions


@dataclass(frozen=True)
class CollisionReport:
    pairs: tuple[tuple[int, int], ...] = ()
    off_road: tuple[int, ...] = ()

    @property
    def any(self) -> bool:
        return bool(self.pairs or self.off_road)

    def involves(self, vehicle_id: int) -> bool:
        return vehicle_id in self.off_road or any(vehicle_id in p for p in self.pairs)


def footprint(s: VehicleState, length: float, width: float) -> np.ndarray:
    """Corners of the oriented rectangle, counter-clockwise, shape (4, 2)."""
    c, sn = math.cos(s.theta), math.sin(s.theta)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -sn], [sn, c]])
    return local @ rot.T + np.array([s.x, s.y])


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals (touching counts)."""
    for poly in (a, b):
        for i in range(2):
            edge = poly[i + 1] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def check_collision(world: WorldState) -> CollisionReport:
    cfg = world.cfg
    length, width = cfg.vehicle_length, cfg.vehicle_width
    reach = math.hypot(length, width)
    vs = world.vehicles
    boxes = [footprint(v.state, length, width) for v in vs]
    pairs = []
    for i in range(len(vs)):
        for j in range(i + 1, len(vs)):
            si, sj = vs[i].state, vs[j].state
            if abs(si.x - sj.x) > reach or abs(si.y - sj.y) > reach:
                continue
            if rectangles_overlap(boxes[i], boxes[j]):
                pairs.append(tuple(sorted((vs[i].id, vs[j].id))))
    off = []
    road = cfg.road
    for veh, box in zip(vs, boxes):
        if veh.controller != EGO:
            continue
        if box[:, 1].min() < road.y_min or box[:, 1].max() > road.y_max:
            off.append(veh.id)
    return CollisionReport(tuple(sorted(pairs)), tuple(off))


@dataclass(frozen=True)
class StepEvents:
    collision: CollisionReport
    removed: tuple[int, ...] = ()
    ego_past_end: bool = False


def step_world(world: WorldState, ego_control: Control) -> tuple[WorldState, StepEvents]:
    """Advance every vehicle by one step; returns a new world.

    IDM controls are computed from the pre-step world.  Traffic past the road
    end is removed; the ego is kept and flagged instead.
    """
    if world.terminal:
        raise UsageError("cannot step a terminal world")
    cfg = world.cfg
    if not cfg.bounds.contains(ego_control):
        raise ConfigError(f"ego control {ego_control} outside bounds")
    controls = {
        v.id: ego_control if v.controller == EGO else idm_to_control(world, v.id)
        for v in world.vehicles
    }
    moved, removed = [], []
    for v in world.vehicles:
        s = step_single_track(v.state, controls[v.id], cfg.road, cfg.bounds.delta_max)
        if v.controller != EGO and s.x > cfg.road.length:
            removed.append(v.id)
            continue
        moved.append(Vehicle(v.id, s, v.controller))
    new = WorldState(cfg, moved, world.t + cfg.road.dt, world.step_count + 1, world.seed)
    ego_past_end = new.ego.state.x > cfg.road.length
    return new, StepEvents(check_collision(new), tuple(removed), ego_past_end)


# ---------------------------------------------------------------- trajectory dump

TRAJECTORY_COLUMNS = [
    "episode", "t", "step", "vehicle_id", "role", "x", "y", "theta", "v", "delta",
    "accel", "steer_rate", "reward", "status",
]


def trajectory_rows(world: WorldState, control: Control | None = None,
                    reward: float | None = None, status: str = "") -> Iterable[dict]:
    """One CSV row per vehicle; control/reward/status only filled for the ego."""
    for v in world.vehicles:
        s = v.state
        is_ego = v.controller == EGO
        yield {
            "t": repr(world.t), "step": world.step_count, "vehicle_id": v.id,
            "role": v.controller, "x": repr(s.x), "y": repr(s.y), "theta": repr(s.theta),
            "v": repr(s.v), "delta": repr(s.delta),
            "accel": repr(control.accel) if is_ego and control else "",
            "steer_rate": repr(control.steer_rate) if is_ego and control else "",
            "reward": repr(reward) if is_ego and reward is not None else "",
            "status": status if is_ego else "",
        }


def write_trajectory_csv(path: str | Path, episodes: Iterable[Iterable[dict]]) -> None:
    """One file for many episodes; rows gain an ``episode`` index column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        for k, rows in enumerate(episodes):
            for row in rows:
                writer.writerow({**row, "episode": k})
