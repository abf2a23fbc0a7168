"""Actor-critic networks and the PPO learner.

The actor maps an observation to a diagonal Gaussian over (steer_rate, accel);
the critic maps it to a scalar state value.  Both use the same backbone family
(GNN with ego readout, or a dense stack on the flat vector) with independent
weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import FLAT, GRAPH, EnvConfig, LaneChangeEnv, derive_rng, derive_seed
from .errors import ConfigError, TrainingAborted, UsageError
from .evaluator import TerminalStatus
from .gnn import GnnParams, gnn_forward, init_gnn
from .observers import GraphBatch, ObservationGraph, batch_graphs
from .tensor import (
    Activation,
    Adam,
    DenseLayer,
    DiagonalNormal,
    STD_FLOOR,
    GradTape,
    ParameterStore,
    Var,
    backward,
    clip_by_global_norm,
    init_mlp,
    log_prob_grads,
    mlp_forward,
    normal_head,
)

ACTION_DIM = 2


# ---------------------------------------------------------------- networks


@dataclass(frozen=True)
class NetworkConfig:
    kind: str = "gnn"
    gnn_depth: int = 3
    gnn_hidden: int = 80
    flat_hidden: tuple[int, ...] = (512, 256, 256)
    head_hidden: tuple[int, ...] = (64,)
    # initial policy std as a fraction of each action's half-range
    init_std_frac: float = 0.25
    # scale applied to the Glorot weights of the actor's output layer
    output_gain: float = 0.01

    def __post_init__(self) -> None:
        if self.kind not in ("gnn", "flat"):
            raise ConfigError(f"unknown network kind {self.kind!r}")
        if not 0 < self.init_std_frac or self.output_gain < 0:
            raise ConfigError("init_std_frac must be > 0 and output_gain >= 0")

    @property
    def observation(self) -> str:
        return GRAPH if self.kind == "gnn" else FLAT


class Network:
    """Backbone plus a dense head; parameters live in ``self.store``."""

    def __init__(self, kind: str, backbone: GnnParams | list[DenseLayer], head: list[DenseLayer]):
        self.kind = kind
        self.backbone = backbone
        self.head = head
        self.store = ParameterStore()
        if kind == "gnn":
            self.store.add_layers(backbone.dense_layers())
        else:
            self.store.add_layers(backbone)
        self.store.add_layers(head)

    @property
    def observation(self) -> str:
        return GRAPH if self.kind == "gnn" else FLAT

    @property
    def out_dim(self) -> int:
        return self.head[-1].out_dim

    def embed(self, obs, tape: GradTape) -> Var:
        if self.kind == "gnn":
            if isinstance(obs, np.ndarray):
                raise ConfigError("GNN backbone needs graph observations")
            if isinstance(obs, ObservationGraph):
                obs = batch_graphs([obs])
            elif not isinstance(obs, GraphBatch):
                obs = batch_graphs(list(obs))
            return gnn_forward(obs, self.backbone, tape)
        if not isinstance(obs, np.ndarray):
            raise ConfigError("flat backbone needs vector observations")
        x = obs if obs.ndim == 2 else obs[None, :]
        return mlp_forward(self.backbone, x, tape)

    def forward(self, obs, tape: GradTape) -> Var:
        return mlp_forward(self.head, self.embed(obs, tape), tape)


class Actor(Network):
    def __init__(self, kind, backbone, head, bounds: np.ndarray):
        super().__init__(kind, backbone, head)
        if self.out_dim != 2 * ACTION_DIM:
            raise ConfigError(f"projection must output {2 * ACTION_DIM} values")
        self.bounds = np.asarray(bounds, dtype=np.float64)

    def distribution(self, raw: np.ndarray) -> DiagonalNormal:
        return normal_head(raw[:, :ACTION_DIM], raw[:, ACTION_DIM:], self.bounds)

    def mean_action(self, obs) -> np.ndarray:
        return actor_forward(obs, self, GradTape(enabled=False)).mean


class Critic(Network):
    def __init__(self, kind, backbone, head):
        super().__init__(kind, backbone, head)
        if self.out_dim != 1:
            raise ConfigError("value head must output a single scalar")


def _backbone(cfg: NetworkConfig, input_dim: int, rng: np.random.Generator, prefix: str):
    if cfg.kind == "gnn":
        net = init_gnn(rng, cfg.gnn_depth, cfg.gnn_hidden, f"{prefix}/gnn")
        return net, net.out_dim
    layers = init_mlp([input_dim, *cfg.flat_hidden], rng, f"{prefix}/flat")
    return layers, cfg.flat_hidden[-1]


def build_actor(cfg: NetworkConfig, flat_dim: int, bounds: np.ndarray,
                rng: np.random.Generator, prefix: str = "actor") -> Actor:
    backbone, width = _backbone(cfg, flat_dim, rng, prefix)
    head = init_mlp([width, *cfg.head_hidden, 2 * ACTION_DIM], rng, f"{prefix}/head",
                    final_activation=Activation.IDENTITY)
    out = head[-1]
    out.weights *= cfg.output_gain
    bounds = np.asarray(bounds, dtype=np.float64)
    target = cfg.init_std_frac * 0.5 * (bounds[:, 1] - bounds[:, 0]) - STD_FLOOR
    out.bias[ACTION_DIM:] = _softplus_inverse(target)
    return Actor(cfg.kind, backbone, head, bounds)


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def build_critic(cfg: NetworkConfig, flat_dim: int, rng: np.random.Generator,
                 prefix: str = "critic") -> Critic:
    backbone, width = _backbone(cfg, flat_dim, rng, prefix)
    head = init_mlp([width, *cfg.head_hidden, 1], rng, f"{prefix}/head",
                    final_activation=Activation.IDENTITY)
    return Critic(cfg.kind, backbone, head)


def actor_forward(obs, actor: Actor, tape: GradTape) -> DiagonalNormal:
    """Observation(s) -> Gaussian over (steer_rate, accel), one row per observation."""
    raw = actor.forward(obs, tape)
    return actor.distribution(raw.value)


def critic_forward(obs, critic: Critic, tape: GradTape) -> np.ndarray:
    return critic.forward(obs, tape).value[:, 0]


# ---------------------------------------------------------------- advantages


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs_per_update: int = 10
    minibatch_size: int = 256
    steps_per_update: int = 2048
    num_envs: int = 8
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    total_updates: int = 300
    checkpoint_every: int = 25
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must be in [0, 1]")
        if self.steps_per_update < 1 or self.num_envs < 1 or self.minibatch_size < 1:
            raise ConfigError("batch sizes must be positive")


@dataclass
class RolloutBuffer:
    """Transitions in time order, one contiguous block per worker.

    ``segment_ends`` marks the last transition of a worker block; if that
    transition is not terminal, ``bootstrap`` holds the critic's value of the
    following state.
    """

    observations: list
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    terminals: np.ndarray
    segment_ends: np.ndarray
    bootstrap: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        n = len(self.rewards)
        for name in ("actions", "log_probs", "values", "terminals", "segment_ends", "bootstrap"):
            if len(getattr(self, name)) != n:
                raise UsageError(f"buffer field {name} has inconsistent length")
        if n and not self.segment_ends[-1]:
            raise UsageError("buffer must end on a segment boundary")


def td_residual(r_t: float, v_t: float, v_next: float, terminal: bool, gamma: float) -> float:
    """One-step TD error; the bootstrap term is dropped at terminal steps."""
    return r_t + gamma * v_next * (0.0 if terminal else 1.0) - v_t


def compute_advantages(buffer: RolloutBuffer, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """GAE(gamma, lambda) per episode; returns (advantages, value_targets).

    Targets use the raw advantages; normalization (if enabled) is applied to
    the returned advantages afterwards.
    """
    n = len(buffer)
    if n == 0:
        raise UsageError("empty rollout buffer")
    buffer.validate()
    adv = np.zeros(n)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        if buffer.segment_ends[t]:
            v_next, gae = buffer.bootstrap[t], 0.0
        else:
            v_next = buffer.values[t + 1]
        term = bool(buffer.terminals[t])
        delta = td_residual(buffer.rewards[t], buffer.values[t], v_next, term, cfg.gamma)
        gae = delta + (0.0 if term else cfg.gamma * cfg.gae_lambda * gae)
        adv[t] = gae
    targets = adv + buffer.values
    if cfg.normalize_advantages and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, targets


# ---------------------------------------------------------------- losses


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


@dataclass
class LossTerms:
    actor_loss: float
    critic_loss: float
    entropy: float
    total: float
    approx_kl: float
    clip_fraction: float
    mean_sigma: float


def select_observations(observations: list, idx: np.ndarray, kind: str):
    if kind == GRAPH:
        return batch_graphs([observations[i] for i in idx])
    return np.stack([observations[i] for i in idx])


def ppo_loss_and_grads(
    obs,
    actions: np.ndarray,
    log_probs_old: np.ndarray,
    advantages: np.ndarray,
    value_targets: np.ndarray,
    actor: Actor,
    critic: Critic,
    cfg: TrainConfig,
) -> tuple[LossTerms, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """PPO loss on one minibatch with hand-derived gradients for both networks.

    total = -mean(clipped surrogate) + value_coef * mean((V - target)^2)
            - entropy_coef * mean(entropy)
    """
    b = len(actions)
    tape = GradTape()
    raw = actor.forward(obs, tape)
    dist = actor.distribution(raw.value)
    logp = dist.log_prob(actions)
    log_ratio = logp - log_probs_old
    ratio = np.exp(log_ratio)
    eps = cfg.clip_eps
    surr = clipped_surrogate(ratio, advantages, eps)
    actor_loss = -float(np.mean(surr))
    entropy = dist.entropy()
    # the unclipped branch carries the gradient unless clipping is active
    inside = (ratio >= 1.0 - eps) & (ratio <= 1.0 + eps)
    unclipped = (ratio * advantages <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages) | inside
    d_logp = np.where(unclipped, -advantages * ratio / b, 0.0)
    g_mean, g_std = log_prob_grads(dist, actions)
    g_mean = g_mean * d_logp[:, None]
    g_std = g_std * d_logp[:, None] - cfg.entropy_coef / (b * dist.std)
    actor_grads = backward(tape, dist.raw_grad(g_mean, g_std)).params

    tape_c = GradTape()
    v_out = critic.forward(obs, tape_c)
    values = v_out.value[:, 0]
    err = values - value_targets
    critic_loss = float(np.mean(err * err))
    g_v = (cfg.value_coef * 2.0 * err / b)[:, None]
    critic_grads = backward(tape_c, g_v).params

    total = actor_loss + cfg.value_coef * critic_loss - cfg.entropy_coef * float(np.mean(entropy))
    if not math.isfinite(total):
        raise TrainingAborted(f"non-finite PPO loss (actor {actor_loss}, critic {critic_loss})")
    terms = LossTerms(
        actor_loss,
        critic_loss,
        float(np.mean(entropy)),
        total,
        float(np.mean((ratio - 1.0) - log_ratio)),
        float(np.mean(~inside)),
        float(np.mean(dist.std)),
    )
    return terms, actor_grads, critic_grads


def ppo_total_loss(obs, actions, log_probs_old, advantages, value_targets,
                   actor: Actor, critic: Critic, cfg: TrainConfig) -> float:
    """Forward-only evaluation of the same total loss."""
    tape = GradTape(enabled=False)
    dist = actor_forward(obs, actor, tape)
    ratio = np.exp(dist.log_prob(actions) - log_probs_old)
    actor_loss = -np.mean(clipped_surrogate(ratio, advantages, cfg.clip_eps))
    values = critic_forward(obs, critic, tape)
    critic_loss = np.mean((values - value_targets) ** 2)
    ent = np.mean(dist.entropy())
    return float(actor_loss + cfg.value_coef * critic_loss - cfg.entropy_coef * ent)


@dataclass
class UpdateStats:
    actor_loss: float
    critic_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    mean_sigma: float
    grad_norm: float


def ppo_update(
    buffer: RolloutBuffer,
    actor: Actor,
    critic: Critic,
    cfg: TrainConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: np.random.Generator,
) -> UpdateStats:
    """Several epochs of shuffled minibatch steps on one rollout buffer."""
    adv, targets = compute_advantages(buffer, cfg)
    n = len(buffer)
    mb = min(cfg.minibatch_size, n)
    acc: list[LossTerms] = []
    norms = []
    for _ in range(cfg.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            obs = select_observations(buffer.observations, idx, actor.observation)
            terms, ga, gc = ppo_loss_and_grads(
                obs, buffer.actions[idx], buffer.log_probs[idx], adv[idx], targets[idx],
                actor, critic, cfg,
            )
            both = {**ga, **gc}
            norms.append(clip_by_global_norm(both, cfg.max_grad_norm))
            actor_opt.step(ga)
            critic_opt.step(gc)
            acc.append(terms)
    return UpdateStats(
        float(np.mean([t.actor_loss for t in acc])),
        float(np.mean([t.critic_loss for t in acc])),
        float(np.mean([t.entropy for t in acc])),
        float(np.mean([t.approx_kl for t in acc])),
        float(np.mean([t.clip_fraction for t in acc])),
        float(np.mean([t.mean_sigma for t in acc])),
        float(np.mean(norms)),
    )


# ---------------------------------------------------------------- rollouts


@dataclass
class EpisodeStats:
    episodes: int = 0
    successes: int = 0
    collisions: int = 0
    timeouts: int = 0
    returns: list[float] = field(default_factory=list)

    def add(self, status: TerminalStatus, ret: float) -> None:
        self.episodes += 1
        self.returns.append(ret)
        if status is TerminalStatus.GOAL_REACHED:
            self.successes += 1
        elif status is TerminalStatus.COLLISION:
            self.collisions += 1
        else:
            self.timeouts += 1

    def rate(self, count: int) -> float:
        return count / self.episodes if self.episodes else 0.0

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else 0.0


class RolloutCollector:
    """Lock-step workers whose episodes carry over between collections.

    Worker ``i`` draws scenario seeds and action noise from its own streams
    derived from ``(seed, tag, i)``.
    """

    def __init__(self, env_cfg: EnvConfig, observation: str, num_envs: int, seed: int):
        self.envs = [LaneChangeEnv(env_cfg, observation) for _ in range(num_envs)]
        self.seed = seed
        self.action_rngs = [derive_rng(seed, "action", i) for i in range(num_envs)]
        self.episode_counts = [0] * num_envs
        self.obs = [self._reset(i) for i in range(num_envs)]

    def _reset(self, i: int):
        k = self.episode_counts[i]
        self.episode_counts[i] += 1
        scenario_seed = derive_seed(self.seed, "scenario", i, k)
        return self.envs[i].reset(scenario_seed, derive_rng(self.seed, "observer", i, k))

    def collect(self, actor: Actor, critic: Critic, steps: int) -> tuple[RolloutBuffer, EpisodeStats]:
        n_envs = len(self.envs)
        quotas = [steps // n_envs + (1 if i < steps % n_envs else 0) for i in range(n_envs)]
        per = [dict(obs=[], act=[], logp=[], rew=[], val=[], term=[]) for _ in range(n_envs)]
        stats = EpisodeStats()
        no_tape = GradTape(enabled=False)
        for t in range(max(quotas)):
            active = [i for i in range(n_envs) if t < quotas[i]]
            obs = [self.obs[i] for i in active]
            batch = _stack(obs, actor.observation)
            dist = actor_forward(batch, actor, no_tape)
            values = critic_forward(batch, critic, no_tape)
            z = np.stack([self.action_rngs[i].standard_normal(ACTION_DIM) for i in active])
            actions = dist.mean + dist.std * z
            logps = dist.log_prob(actions)
            for row, i in enumerate(active):
                action = actions[row]
                next_obs, reward, status = self.envs[i].step(action)
                rec = per[i]
                rec["obs"].append(obs[row])
                rec["act"].append(action)
                rec["logp"].append(logps[row])
                rec["rew"].append(reward)
                rec["val"].append(values[row])
                done = status is not TerminalStatus.RUNNING
                rec["term"].append(done)
                if done:
                    stats.add(status, self.envs[i].episode_return)
                    next_obs = self._reset(i)
                self.obs[i] = next_obs
        # bootstrap values for workers whose block ends mid-episode
        live = [i for i in range(n_envs) if quotas[i] > 0]
        boot = critic_forward(_stack([self.obs[i] for i in live], actor.observation), critic, no_tape)
        observations, actions, logps, rews, vals, terms, ends, boots = [], [], [], [], [], [], [], []
        for k, i in enumerate(live):
            rec = per[i]
            m = len(rec["rew"])
            observations.extend(rec["obs"])
            actions.extend(rec["act"])
            logps.extend(rec["logp"])
            rews.extend(rec["rew"])
            vals.extend(rec["val"])
            terms.extend(rec["term"])
            seg_end = np.zeros(m, dtype=bool)
            seg_end[-1] = True
            ends.append(seg_end)
            b = np.zeros(m)
            if not rec["term"][-1]:
                b[-1] = boot[k]
            boots.append(b)
        buffer = RolloutBuffer(
            observations,
            np.array(actions, dtype=np.float64).reshape(-1, ACTION_DIM),
            np.array(logps),
            np.array(rews),
            np.array(vals),
            np.array(terms, dtype=bool),
            np.concatenate(ends) if ends else np.zeros(0, dtype=bool),
            np.concatenate(boots) if boots else np.zeros(0),
        )
        return buffer, stats


def _stack(obs: Sequence, observation: str):
    if observation == GRAPH:
        return batch_graphs(list(obs))
    return np.stack(obs)


def collect_rollouts(actor: Actor, critic: Critic, env_cfg: EnvConfig, cfg: TrainConfig,
                     seed: int) -> tuple[RolloutBuffer, EpisodeStats]:
    """Fresh workers, ``cfg.steps_per_update`` transitions."""
    collector = RolloutCollector(env_cfg, actor.observation, cfg.num_envs, seed)
    return collector.collect(actor, critic, cfg.steps_per_update)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    n_scenarios: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_return: float
    outcomes: list[str] = field(default_factory=list)

    def as_row(self) -> dict:
        return {
            "n_scenarios": self.n_scenarios,
            "success_rate": repr(self.success_rate),
            "collision_rate": repr(self.collision_rate),
            "timeout_rate": repr(self.timeout_rate),
            "mean_return": repr(self.mean_return),
        }


def evaluate_policy(
    policy,
    env_cfg: EnvConfig,
    n_scenarios: int,
    seed: int,
    observation: str | None = None,
    record: bool = False,
) -> tuple[EvalReport, list[list[dict]]]:
    """Run seeded scenarios with the deterministic mean action.

    ``policy`` needs ``mean_action(batched_obs) -> (B, 2)`` and, unless
    ``observation`` is given, an ``observation`` attribute.  Scenario ``i``
    uses the same seeds for any policy, so reports are comparable.
    Returns the report and (when ``record``) per-scenario trajectory rows.
    """
    if n_scenarios < 1:
        raise ConfigError("n_scenarios must be >= 1")
    observation = observation or policy.observation
    envs = [LaneChangeEnv(env_cfg, observation, record=record) for _ in range(n_scenarios)]
    obs = [
        env.reset(derive_seed(seed, "eval-scenario", i), derive_rng(seed, "eval-observer", i))
        for i, env in enumerate(envs)
    ]
    status: list[TerminalStatus | None] = [None] * n_scenarios
    active = list(range(n_scenarios))
    while active:
        actions = policy.mean_action(_stack([obs[i] for i in active], observation))
        still = []
        for row, i in enumerate(active):
            nxt, _, st = envs[i].step(actions[row])
            if st is TerminalStatus.RUNNING:
                obs[i] = nxt
                still.append(i)
            else:
                status[i] = st
        active = still
    stats = EpisodeStats()
    for env, st in zip(envs, status):
        stats.add(st, env.episode_return)
    report = EvalReport(
        n_scenarios,
        stats.rate(stats.successes),
        stats.rate(stats.collisions),
        stats.rate(stats.timeouts),
        stats.mean_return,
        [st.value for st in status],
    )
    return report, [env.trajectory for env in envs] if record else []
