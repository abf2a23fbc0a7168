"""Episode wrapper tying the simulator, an observer and the evaluator together."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluator import (
    EvaluatorConfig,
    GoalSpec,
    TerminalStatus,
    check_terminal,
    check_weight_dominance,
    compute_reward,
    goal_from_config,
)
from .observers import ObserverConfig, observe_flat, observe_graph
from .sim import Control, ScenarioConfig, WorldState, generate_scenario, step_world, trajectory_rows

GRAPH = "graph"
FLAT = "flat"


def derive_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Independent stream for ``(seed, tag, ...)``; string tags are hashed stably."""
    words = [int(seed)]
    for tag in tags:
        if isinstance(tag, str):
            words.extend(tag.encode("utf-8"))
        else:
            words.append(int(tag))
    return np.random.default_rng(np.random.SeedSequence(words))


def derive_seed(seed: int, *tags: int | str) -> int:
    return int(derive_rng(seed, *tags).integers(0, 2**63 - 1))


@dataclass(frozen=True)
class EnvConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)

    def __post_init__(self) -> None:
        check_weight_dominance(self.scenario, self.goal, self.evaluator.weights)

    @property
    def goal(self) -> GoalSpec:
        return goal_from_config(self.scenario, self.evaluator)


def action_to_control(action: np.ndarray) -> Control:
    """Action vectors are ordered (steer_rate, accel)."""
    return Control(accel=float(action[1]), steer_rate=float(action[0]))


class LaneChangeEnv:
    """One episode at a time; observations are graphs or flat vectors."""

    def __init__(self, cfg: EnvConfig, observation: str = GRAPH, record: bool = False):
        self.cfg = cfg
        self.observation = observation
        self.goal = cfg.goal
        self.record = record
        self.world: WorldState | None = None
        self.obs_rng: np.random.Generator | None = None
        self.episode_return = 0.0
        self.trajectory: list[dict] = []

    def observe(self):
        if self.observation == GRAPH:
            return observe_graph(self.world, self.cfg.observer, self.obs_rng)
        return observe_flat(self.world, self.cfg.observer, self.obs_rng)

    def reset(self, scenario_seed: int, obs_rng: np.random.Generator | None = None):
        self.world = generate_scenario(scenario_seed, self.cfg.scenario)
        self.obs_rng = obs_rng
        self.episode_return = 0.0
        self.trajectory = []
        if self.record:
            self.trajectory.extend(trajectory_rows(self.world, status=TerminalStatus.RUNNING.value))
        return self.observe()

    def step(self, action: np.ndarray) -> tuple[object, float, TerminalStatus]:
        """Apply a clamped action; returns (next observation or None, reward, status)."""
        u = self.cfg.scenario.bounds.clamp(action_to_control(action))
        world, events = step_world(self.world, u)
        reward = compute_reward(world, u, events, self.goal, self.cfg.evaluator.weights)
        status = check_terminal(world, events, self.goal, self.cfg.evaluator.max_steps)
        world.terminal = status is not TerminalStatus.RUNNING
        self.world = world
        self.episode_return += reward
        if self.record:
            self.trajectory.extend(trajectory_rows(world, u, reward, status.value))
        obs = None if world.terminal else self.observe()
        return obs, reward, status
