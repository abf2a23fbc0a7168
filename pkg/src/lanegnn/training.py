"""Training, checkpoint I/O and evaluation/ablation orchestration."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig, config_hash, dump_config
from .env import derive_rng, derive_seed
from .errors import ConfigError, TrainingAborted
from .ppo import (
    Actor,
    Critic,
    EvalReport,
    RolloutCollector,
    build_actor,
    build_critic,
    evaluate_policy,
    ppo_update,
)
from .tensor import Adam, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "update", "env_steps", "episodes", "mean_return", "success_rate", "collision_rate",
    "timeout_rate", "actor_loss", "critic_loss", "mean_sigma", "approx_kl", "clip_fraction",
]


def build_agent(cfg: ExperimentConfig) -> tuple[Actor, Critic]:
    rng = derive_rng(cfg.train.seed, "init")
    flat_dim = cfg.observer.flat_dim
    actor = build_actor(cfg.network, flat_dim, cfg.scenario.bounds.as_array(), rng)
    critic = build_critic(cfg.network, flat_dim, rng)
    return actor, critic


def agent_arrays(actor: Actor, critic: Critic) -> dict[str, np.ndarray]:
    return {**dict(actor.store), **dict(critic.store)}


def save_agent(path: Path, cfg: ExperimentConfig, actor: Actor, critic: Critic, update: int) -> None:
    meta = json.dumps({
        "network": cfg.network.kind,
        "update": update,
        "config_hash": config_hash(cfg),
        "seed": cfg.train.seed,
    })
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, agent_arrays(actor, critic), meta)
    tmp.replace(path)


def load_agent(path: str | Path, cfg: ExperimentConfig) -> tuple[Actor, Critic, dict]:
    """Rebuild networks from ``cfg`` and copy checkpoint weights into them."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    arrays, meta_text = load_checkpoint(path)
    meta = json.loads(meta_text)
    kind = meta.get("network")
    if kind is not None and kind != cfg.network.kind:
        raise ConfigError(
            f"checkpoint {path} holds a {kind!r} network but the config asks for "
            f"{cfg.network.kind!r}"
        )
    actor, critic = build_agent(cfg)
    try:
        actor.store.load_from(arrays)
        critic.store.load_from(arrays)
    except ConfigError as exc:
        raise ConfigError(f"checkpoint {path} is incompatible with the config: {exc}") from exc
    return actor, critic, meta


@dataclass
class TrainResult:
    actor: Actor
    critic: Critic
    checkpoint: Path
    metrics: Path
    rows: list[dict]


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.train.total_updates`` PPO updates, writing artefacts to ``out_dir``.

    Artefacts: ``config.resolved.yaml``, ``metrics.csv`` (one row per update),
    ``checkpoint.npz`` (every ``checkpoint_every`` updates and at the end).
    On a non-finite loss the last good checkpoint is kept and
    :class:`TrainingAborted` propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved.yaml")
    tc = cfg.train
    actor, critic = build_agent(cfg)
    actor_opt = Adam(actor.store, tc.lr)
    critic_opt = Adam(critic.store, tc.lr)
    collector = RolloutCollector(cfg.env, actor.observation, tc.num_envs,
                                 derive_seed(tc.seed, "rollout"))
    update_rng = derive_rng(tc.seed, "minibatch")
    ckpt = out / "checkpoint.npz"
    metrics_path = out / "metrics.csv"
    save_agent(ckpt, cfg, actor, critic, 0)
    rows: list[dict] = []
    env_steps = 0
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for update in range(1, tc.total_updates + 1):
            buffer, stats = collector.collect(actor, critic, tc.steps_per_update)
            env_steps += len(buffer)
            try:
                us = ppo_update(buffer, actor, critic, tc, actor_opt, critic_opt, update_rng)
            except TrainingAborted:
                log.error("non-finite loss at update %d; keeping last checkpoint", update)
                raise
            row = {
                "update": update,
                "env_steps": env_steps,
                "episodes": stats.episodes,
                "mean_return": _fmt(stats.mean_return),
                "success_rate": _fmt(stats.rate(stats.successes)),
                "collision_rate": _fmt(stats.rate(stats.collisions)),
                "timeout_rate": _fmt(stats.rate(stats.timeouts)),
                "actor_loss": _fmt(us.actor_loss),
                "critic_loss": _fmt(us.critic_loss),
                "mean_sigma": _fmt(us.mean_sigma),
                "approx_kl": _fmt(us.approx_kl),
                "clip_fraction": _fmt(us.clip_fraction),
            }
            writer.writerow(row)
            fh.flush()
            rows.append(row)
            if progress is not None:
                progress(row)
            if update % tc.checkpoint_every == 0 or update == tc.total_updates:
                save_agent(ckpt, cfg, actor, critic, update)
    return TrainResult(actor, critic, ckpt, metrics_path, rows)


# ---------------------------------------------------------------- evaluation


EVAL_COLUMNS = ["network", "noise_stddev", "n_scenarios", "success_rate", "collision_rate",
                "timeout_rate", "mean_return"]


def evaluate(cfg: ExperimentConfig, actor: Actor, noise_stddev: float = 0.0,
             n_scenarios: int | None = None, seed: int | None = None,
             record: bool = False) -> tuple[EvalReport, list[list[dict]]]:
    """Mean-action evaluation, optionally with observation distance noise."""
    env_cfg = cfg.env
    if noise_stddev != env_cfg.observer.noise_stddev:
        env_cfg = dataclasses.replace(
            env_cfg, observer=dataclasses.replace(env_cfg.observer, noise_stddev=noise_stddev)
        )
    n = n_scenarios if n_scenarios is not None else cfg.evaluation.n_scenarios
    s = seed if seed is not None else cfg.evaluation.seed
    return evaluate_policy(actor, env_cfg, n, s, record=record)


@dataclass
class ComparisonRow:
    scenario: str
    network: str
    noise_stddev: float
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_return: float
    delta_success: float
    delta_collision: float


COMPARISON_COLUMNS = [f.name for f in dataclasses.fields(ComparisonRow)]


def ablation_rows(
    reports: dict[str, dict[float, EvalReport]],
    noises: list[float] | None = None,
) -> list[ComparisonRow]:
    """Rows ordered Nominal first, then each ablation noise level; deltas vs nominal.

    ``reports[label][noise]`` must contain ``noise == 0.0`` for every label.
    ``noises`` lists the ablation levels (default: every non-zero level present).
    ``delta_success = nominal - noisy``; ``delta_collision = noisy - nominal``.
    """
    rows = []
    if noises is None:
        noises = sorted({n for per in reports.values() for n in per if n != 0.0})
    for scenario, levels in (("Nominal", [0.0]), ("Ablation", noises)):
        for noise in levels:
            for label, per in reports.items():
                if noise not in per:
                    continue
                r, nom = per[noise], per[0.0]
                rows.append(ComparisonRow(
                    scenario, label, noise, r.success_rate, r.collision_rate, r.timeout_rate,
                    r.mean_return, nom.success_rate - r.success_rate,
                    r.collision_rate - nom.collision_rate,
                ))
    return rows


def format_table(rows: list[ComparisonRow]) -> str:
    """Human-readable comparison table."""
    head = (f"{'Scenario':<9} | {'Network':<7} | {'Noise [m]':>9} | {'Success [%]':>11} | "
            f"{'Collision [%]':>13} | {'Timeout [%]':>11} | {'dSuccess':>8} | {'dCollision':>10}")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.scenario:<9} | {r.network:<7} | {r.noise_stddev:>9.2f} | "
            f"{100 * r.success_rate:>11.1f} | {100 * r.collision_rate:>13.1f} | "
            f"{100 * r.timeout_rate:>11.1f} | {100 * r.delta_success:>+8.1f} | "
            f"{100 * r.delta_collision:>+10.1f}"
        )
    return "\n".join(lines)


def write_comparison_csv(path: str | Path, rows: list[ComparisonRow], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS)
        writer.writeheader()
        for r in rows:
            d = dataclasses.asdict(r)
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items()})
