"""Re-run the evaluator over a dumped trajectory CSV.

Each step's world is rebuilt from the logged vehicle rows, and the reward and
status are recomputed from it and from the logged ego control.  Floats are
written with ``repr``, so an untouched dump reproduces bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .env import EnvConfig
from .errors import LaneGnnError
from .evaluator import TerminalStatus, check_terminal, compute_reward
from .sim import (
    EGO,
    IDM,
    TRAJECTORY_COLUMNS,
    Control,
    StepEvents,
    Vehicle,
    VehicleState,
    WorldState,
    check_collision,
)


class TrajectoryParseError(LaneGnnError, ValueError):
    def __init__(self, path: Path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass
class StepRecord:
    line: int
    t: float
    step: int
    vehicles: list[Vehicle]
    control: Control | None
    reward: float | None
    status: str


@dataclass
class Mismatch:
    episode: int
    step: int
    line: int
    field: str
    stored: str
    recomputed: str

    def __str__(self) -> str:
        return (f"episode {self.episode} step {self.step} (line {self.line}): {self.field} "
                f"stored {self.stored}, recomputed {self.recomputed}")


def _num(row: dict, key: str, path: Path, line: int, kind=float):
    text = row.get(key)
    if text is None or text == "":
        raise TrajectoryParseError(path, line, f"missing value for {key!r}")
    try:
        return kind(text)
    except ValueError:
        raise TrajectoryParseError(path, line, f"bad {key} value {text!r}") from None


def read_trajectory_csv(path: str | Path) -> dict[int, list[StepRecord]]:
    """Episodes keyed by index, each a list of steps in file order."""
    path = Path(path)
    episodes: dict[int, list[StepRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != TRAJECTORY_COLUMNS:
            raise TrajectoryParseError(path, 1, f"expected header {','.join(TRAJECTORY_COLUMNS)}")
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise TrajectoryParseError(path, line, "wrong number of fields")
            ep = _num(row, "episode", path, line, int)
            step = _num(row, "step", path, line, int)
            role = row["role"]
            if role not in (EGO, IDM):
                raise TrajectoryParseError(path, line, f"unknown role {role!r}")
            steps = episodes.setdefault(ep, [])
            if not steps or steps[-1].step != step:
                if steps and step != steps[-1].step + 1:
                    raise TrajectoryParseError(path, line, f"step {step} out of sequence")
                steps.append(StepRecord(line, _num(row, "t", path, line), step, [], None, None, ""))
            rec = steps[-1]
            state = VehicleState(*(_num(row, k, path, line) for k in ("x", "y", "theta", "v", "delta")))
            rec.vehicles.append(Vehicle(_num(row, "vehicle_id", path, line, int), state, role))
            if role == EGO:
                rec.status = row["status"]
                if row["accel"] != "":
                    rec.control = Control(_num(row, "accel", path, line),
                                          _num(row, "steer_rate", path, line))
                    rec.reward = _num(row, "reward", path, line)
    for ep, steps in episodes.items():
        for rec in steps:
            if sum(v.controller == EGO for v in rec.vehicles) != 1:
                raise TrajectoryParseError(path, rec.line, f"episode {ep} step {rec.step} "
                                           "needs exactly one ego row")
            if rec.step > 0 and rec.control is None:
                raise TrajectoryParseError(path, rec.line, "ego row lacks control and reward")
    return episodes


def replay_episode(env: EnvConfig, episode: int, steps: list[StepRecord]) -> list[Mismatch]:
    """Recompute reward and status for every logged transition."""
    goal = env.goal
    weights = env.evaluator.weights
    scn = env.scenario
    out: list[Mismatch] = []
    for rec in steps:
        world = WorldState(scn, rec.vehicles, rec.t, rec.step)
        if rec.step == 0:
            if rec.status != TerminalStatus.RUNNING.value:
                out.append(Mismatch(episode, 0, rec.line, "status", rec.status, "running"))
            continue
        events = StepEvents(check_collision(world),
                            ego_past_end=world.ego.state.x > scn.road.length)
        reward = compute_reward(world, rec.control, events, goal, weights)
        status = check_terminal(world, events, goal, env.evaluator.max_steps).value
        if reward != rec.reward:
            out.append(Mismatch(episode, rec.step, rec.line, "reward", repr(rec.reward),
                                repr(reward)))
        if status != rec.status:
            out.append(Mismatch(episode, rec.step, rec.line, "status", rec.status, status))
    if steps:
        last = steps[-1]
        if last.status == TerminalStatus.RUNNING.value and last.step > 0:
            out.append(Mismatch(episode, last.step, last.line, "status", "running",
                                "a terminal status at the last step"))
    return out


def replay_file(path: str | Path, env: EnvConfig) -> tuple[int, list[Mismatch]]:
    """Returns (number of episodes, all mismatches)."""
    episodes = read_trajectory_csv(path)
    mismatches = []
    for ep in sorted(episodes):
        mismatches.extend(replay_episode(env, ep, episodes[ep]))
    return len(episodes), mismatches
