import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanegnn.config import config_from_dict
from lanegnn.env import EnvConfig
from lanegnn.errors import ConfigError
from lanegnn.evaluator import (
    EvaluatorConfig,
    GoalSpec,
    RewardWeights,
    TerminalStatus,
    check_terminal,
    compute_reward,
    goal_from_config,
    max_shaped_penalty,
    normalized_control,
)
from lanegnn.sim import (
    EGO,
    CollisionReport,
    Control,
    ControlBounds,
    ScenarioConfig,
    StepEvents,
    Vehicle,
    VehicleState,
    WorldState,
)

SCN = ScenarioConfig()
NO_EVENTS = StepEvents(CollisionReport())
EGO_HIT = StepEvents(CollisionReport(pairs=((0, 3),)))


def ego_world(x, y, v, theta=0.0, step_count=5, cfg=SCN):
    return WorldState(cfg, [Vehicle(0, VehicleState(x, y, theta, v), EGO)], 1.0, step_count)


def test_weights_multiply_shaped_terms_hand_example():
    goal = GoalSpec((15.0, 25.0), (3.0, 4.0), (11.0, 15.0), (-0.1, 0.1), 13.0)
    w = RewardWeights(0.001, 0.01, 0.05)
    world = ego_world(10.0, 0.0, 12.0)
    r = compute_reward(world, Control(accel=2.0, steer_rate=0.1), NO_EVENTS, goal, w)
    assert r == pytest.approx(-0.001 * 112.25 - 0.01 * 1.0 - 0.05 * 0.5, abs=1e-12)
    assert r == pytest.approx(-0.14725, abs=1e-12)


def test_at_goal_center_everything_vanishes_except_bonus():
    goal = goal_from_config(SCN, EvaluatorConfig())
    gx, gy = goal.center
    w = RewardWeights()
    world = ego_world(gx, gy, goal.v_des)
    assert compute_reward(world, Control(), NO_EVENTS, goal, w) == pytest.approx(1.0, abs=1e-15)
    # same zero-penalty state, but outside the goal box on heading: pure zero
    tilted = ego_world(gx, gy, goal.v_des, theta=0.2)
    assert compute_reward(tilted, Control(), NO_EVENTS, goal, w) == 0.0


def test_collision_adds_minus_one():
    goal = goal_from_config(SCN, EvaluatorConfig())
    w = RewardWeights()
    world = ego_world(30.0, 0.0, 11.0)
    u = Control(1.0, -0.1)
    shaped = compute_reward(world, u, NO_EVENTS, goal, w)
    hit = compute_reward(world, u, EGO_HIT, goal, w)
    assert hit == pytest.approx(shaped - 1.0, abs=1e-15)


def test_goal_bonus_withheld_on_collision_step():
    goal = goal_from_config(SCN, EvaluatorConfig())
    gx, gy = goal.center
    world = ego_world(gx, gy, goal.v_des)
    assert compute_reward(world, Control(), EGO_HIT, goal, RewardWeights()) == pytest.approx(-1.0)


def test_normalized_control_uses_side_specific_bound():
    b = ControlBounds()
    assert normalized_control(Control(4.0, 0.2), b) == (1.0, 1.0)
    assert normalized_control(Control(-5.0, -0.2), b) == (-1.0, -1.0)
    assert normalized_control(Control(-2.5, 0.1), b) == (-0.5, 0.5)


def test_terminal_precedence():
    goal = goal_from_config(SCN, EvaluatorConfig())
    gx, gy = goal.center
    inside = ego_world(gx, gy, goal.v_des, step_count=100)
    assert check_terminal(inside, NO_EVENTS, goal, 100) == TerminalStatus.GOAL_REACHED
    assert check_terminal(inside, EGO_HIT, goal, 100) == TerminalStatus.COLLISION
    mid = ego_world(30.0, 0.0, 12.0, step_count=100)
    assert check_terminal(mid, NO_EVENTS, goal, 100) == TerminalStatus.TIMEOUT
    early = ego_world(30.0, 0.0, 12.0, step_count=99)
    assert check_terminal(early, NO_EVENTS, goal, 100) == TerminalStatus.RUNNING
    past = StepEvents(CollisionReport(), ego_past_end=True)
    assert check_terminal(early, past, goal, 100) == TerminalStatus.TIMEOUT


def test_traffic_only_collision_does_not_end_episode():
    goal = goal_from_config(SCN, EvaluatorConfig())
    ev = StepEvents(CollisionReport(pairs=((2, 3),)))
    w = ego_world(30.0, 0.0, 12.0)
    assert check_terminal(w, ev, goal, 100) == TerminalStatus.RUNNING


def test_goal_region_defaults():
    goal = goal_from_config(SCN, EvaluatorConfig())
    assert goal.y_range == pytest.approx((3.5 - 0.875, 3.5 + 0.875))
    assert goal.v_range == (10.5, 14.5)
    assert goal.theta_range == (-0.1, 0.1)


def test_invalid_inputs_rejected():
    with pytest.raises(ConfigError):
        RewardWeights(-1.0, 0.0, 0.0)
    with pytest.raises(ConfigError):
        GoalSpec((1.0, 1.0), (0, 1), (0, 1), (0, 1), 1.0)


def test_collision_dominates_default_shaping():
    env = EnvConfig()
    assert max_shaped_penalty(env.scenario, env.goal, env.evaluator.weights) < 1.0


def test_non_dominant_weights_rejected():
    with pytest.raises(ConfigError):
        EnvConfig(evaluator=EvaluatorConfig(weights=RewardWeights(0.001, 0.01, 0.05)))
    with pytest.raises(ConfigError):
        config_from_dict({"evaluator": {"weights": {"w_vel": 1.0}}})


positions = st.tuples(st.floats(0, 200), st.floats(-1.75, 5.25), st.floats(0, 20), st.floats(-0.5, 0.5))
controls = st.tuples(st.floats(-5, 4), st.floats(-0.2, 0.2))


@settings(max_examples=200, deadline=None)
@given(positions, controls)
def test_no_event_reward_is_non_positive_unless_goal(pose, u):
    goal = goal_from_config(SCN, EvaluatorConfig())
    w = ego_world(*pose)
    r = compute_reward(w, Control(*u), NO_EVENTS, goal, RewardWeights())
    inside = goal.contains(pose[0], pose[1], pose[2], pose[3])
    assert (r <= 1.0) if inside else (r <= 0.0)
    # pure function
    assert r == compute_reward(w, Control(*u), NO_EVENTS, goal, RewardWeights())


@settings(max_examples=200, deadline=None)
@given(positions, controls, st.floats(0.0, 1.0))
def test_reward_non_increasing_in_control_magnitude(pose, u, shrink):
    goal = goal_from_config(SCN, EvaluatorConfig())
    w = ego_world(*pose)
    big = compute_reward(w, Control(*u), NO_EVENTS, goal, RewardWeights())
    small = compute_reward(w, Control(u[0] * shrink, u[1] * shrink), NO_EVENTS, goal, RewardWeights())
    assert small >= big - 1e-15


@settings(max_examples=100, deadline=None)
@given(positions, controls)
def test_shaped_magnitude_within_bound_for_speeds_in_spawn_range(pose, u):
    goal = goal_from_config(SCN, EvaluatorConfig())
    x, y, v, th = pose
    v = min(v, SCN.speed_range[1])
    r = compute_reward(ego_world(x, y, v, th), Control(*u), NO_EVENTS, goal, RewardWeights())
    bound = max_shaped_penalty(SCN, goal, RewardWeights())
    shaped = r - (1.0 if goal.contains(x, y, v, th) else 0.0)
    assert -bound - 1e-12 <= shaped <= 0.0
    assert math.isfinite(r)
