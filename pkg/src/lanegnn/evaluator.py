"""Per-step reward and episode termination for the lane-change task."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import ConfigError
from .sim import Control, ControlBounds, ScenarioConfig, StepEvents, WorldState


class TerminalStatus(str, enum.Enum):
    RUNNING = "running"
    COLLISION = "collision"
    GOAL_REACHED = "goal_reached"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class RewardWeights:
    w_goal_dist: float = 2e-6
    w_vel: float = 0.002
    w_act: float = 0.01
    r_col: float = field(default=-1.0, init=False)
    r_goal_reached: float = field(default=1.0, init=False)

    def __post_init__(self) -> None:
        if min(self.w_goal_dist, self.w_vel, self.w_act) < 0:
            raise ConfigError(f"reward weights must be non-negative: {self}")


@dataclass(frozen=True)
class GoalSpec:
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    v_range: tuple[float, float]
    theta_range: tuple[float, float]
    v_des: float

    def __post_init__(self) -> None:
        for name in ("x_range", "y_range", "v_range", "theta_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"goal {name} is empty: {(lo, hi)}")

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * sum(self.x_range), 0.5 * sum(self.y_range)

    def contains(self, x: float, y: float, v: float, theta: float) -> bool:
        return (
            self.x_range[0] <= x <= self.x_range[1]
            and self.y_range[0] <= y <= self.y_range[1]
            and self.v_range[0] <= v <= self.v_range[1]
            and self.theta_range[0] <= theta <= self.theta_range[1]
        )


@dataclass(frozen=True)
class EvaluatorConfig:
    weights: RewardWeights = field(default_factory=RewardWeights)
    v_des: float = 12.5
    speed_tolerance: float = 2.0
    heading_tolerance: float = 0.1
    lateral_tolerance_frac: float = 0.25
    max_steps: int = 100


def goal_from_config(scn: ScenarioConfig, ev: EvaluatorConfig) -> GoalSpec:
    """Left-lane goal segment: y within a quarter lane of the center line."""
    road = scn.road
    yc = road.lane_center(scn.goal_lane)
    dy = ev.lateral_tolerance_frac * road.lane_width
    return GoalSpec(
        x_range=tuple(scn.goal_x_range),
        y_range=(yc - dy, yc + dy),
        v_range=(ev.v_des - ev.speed_tolerance, ev.v_des + ev.speed_tolerance),
        theta_range=(-ev.heading_tolerance, ev.heading_tolerance),
        v_des=ev.v_des,
    )


def normalized_control(u: Control, bounds: ControlBounds) -> tuple[float, float]:
    """Each component divided by the bound on its own side of zero."""

    def scale(val: float, lo: float, hi: float) -> float:
        ref = hi if val >= 0 else -lo
        return val / ref if ref > 0 else 0.0

    return scale(u.accel, *bounds.accel), scale(u.steer_rate, *bounds.steer_rate)


def shaping_terms(world: WorldState, u: Control, goal: GoalSpec, w: RewardWeights):
    ego = world.ego.state
    gx, gy = goal.center
    d2 = (ego.x - gx) ** 2 + (ego.y - gy) ** 2
    na, ns = normalized_control(u, world.cfg.bounds)
    return (
        -w.w_goal_dist * d2,
        -w.w_vel * (ego.v - goal.v_des) ** 2,
        -w.w_act * (na * na + ns * ns),
    )


def goal_reached(world: WorldState, goal: GoalSpec) -> bool:
    s = world.ego.state
    return goal.contains(s.x, s.y, s.v, s.theta)


def compute_reward(
    world_after: WorldState,
    ego_control: Control,
    events: StepEvents,
    goal: GoalSpec,
    w: RewardWeights,
) -> float:
    """Collision and goal events plus the three shaped penalties.

    The goal bonus is withheld when the ego also collided on this step.
    """
    ego_id = world_after.ego.id
    collided = events.collision.involves(ego_id)
    r = sum(shaping_terms(world_after, ego_control, goal, w))
    if collided:
        r += w.r_col
    elif goal_reached(world_after, goal):
        r += w.r_goal_reached
    return r


def check_terminal(
    world: WorldState, events: StepEvents, goal: GoalSpec, max_steps: int
) -> TerminalStatus:
    """Collision > GoalReached > Timeout > Running.

    An ego that drives past the road end without reaching the goal times out.
    """
    if events.collision.involves(world.ego.id):
        return TerminalStatus.COLLISION
    if goal_reached(world, goal):
        return TerminalStatus.GOAL_REACHED
    if world.step_count >= max_steps or events.ego_past_end:
        return TerminalStatus.TIMEOUT
    return TerminalStatus.RUNNING


def max_shaped_penalty(scn: ScenarioConfig, goal: GoalSpec, w: RewardWeights) -> float:
    """Upper bound on the per-step magnitude of the three shaped terms.

    Positions are bounded by the road, speeds by ``[0, speed_range[1]]``.
    """
    road = scn.road
    gx, gy = goal.center
    dx = max(gx, road.length - gx)
    dy = max(gy - road.y_min, road.y_max - gy)
    dv = max(goal.v_des, scn.speed_range[1] - goal.v_des)
    return w.w_goal_dist * (dx * dx + dy * dy) + w.w_vel * dv * dv + 2.0 * w.w_act


def check_weight_dominance(scn: ScenarioConfig, goal: GoalSpec, w: RewardWeights) -> None:
    bound = max_shaped_penalty(scn, goal, w)
    if not bound < abs(w.r_col):
        raise ConfigError(
            f"shaped penalties can reach {bound:.3f} per step, not dominated by the "
            f"collision penalty {abs(w.r_col)}"
        )
