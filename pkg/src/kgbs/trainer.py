"""Episodic single-agent Q-learning against a simulated oracle."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BudgetExhausted, ConfigError, TrainingDiverged
from .graph import INFINITE, KnowledgeGraph, dist_to_nearest_untested_bias
from .oracle import SimulatedOracle
from .policy import DEFAULT_GAMMA, QNetwork, Transition, Walk, epsilon_at, select_action, td_update
from .rng import derive_seed, substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardParams:
    beta: float = 1.0
    alpha: float = 0.1
    w: float = 0.15

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("reward beta must be positive")
        if self.alpha < 0 or self.w < 0:
            raise ConfigError("reward alpha and w must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    n_episodes: int = 600
    n_tries: int = 200
    max_steps: int = 2000
    eps0: float = 1.0
    decay: float = 0.994
    eps_floor: float = 0.2
    eta: float = 1e-3
    gamma: float = DEFAULT_GAMMA
    reward: RewardParams = field(default_factory=RewardParams)
    hidden: int = 64
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_episodes", "n_tries", "max_steps", "hidden", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.eps_floor <= self.eps0 <= 1.0:
            raise ConfigError("need 0 <= eps_floor <= eps0 <= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if isinstance(self.reward, dict):
            object.__setattr__(self, "reward", RewardParams(**self.reward))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def epsilon(self, episode: int) -> float:
        return epsilon_at(episode, self.eps0, self.decay, self.eps_floor)


def step_reward(new_labels, dist, params: RewardParams) -> float:
    """beta * (#new bias nodes) - alpha * (#new nodes) + w / (dist + 1).

    ``new_labels`` holds the labels of the nodes first tested this step; the
    distance bonus vanishes when ``dist`` is INFINITE.
    """
    new_labels = list(new_labels)
    bonus = 0.0 if dist is INFINITE else params.w / (dist + 1)
    return params.beta * sum(new_labels) - params.alpha * len(new_labels) + bonus


@dataclass
class EpisodeStats:
    tries: int = 0
    successes: int = 0
    total_steps: int = 0
    queries: int = 0
    try_steps: list[int] = field(default_factory=list)
    try_success: list[bool] = field(default_factory=list)
    budget_exhausted: bool = False

    @property
    def success_rate(self) -> float:
        return self.successes / self.tries if self.tries else 0.0

    @property
    def mean_steps_to_bias(self) -> float:
        """Mean steps per try; unsuccessful tries count their full length."""
        return float(np.mean(self.try_steps)) if self.try_steps else 0.0


def run_episode(graph: KnowledgeGraph, oracle, table, qnet, episode_index: int, config: TrainConfig, rng):
    """Collect transitions from ``config.n_tries`` epsilon-greedy walks.

    A walk starts at a uniform random node and repeatedly tests one untested
    neighbor of the nodes it has tested so far. It ends on reaching a bias
    node, after ``max_steps`` moves, or when no untested neighbor remains.
    The reward of a move is credited to the arrival at its target node.
    """
    eps = config.epsilon(episode_index)
    params = config.reward
    limit = max(oracle.limit, 1)
    h = table.h
    transitions: list[Transition] = []
    stats = EpisodeStats()
    spent0 = oracle.spent
    n = graph.node_count
    try:
        for _ in range(config.n_tries):
            start = int(rng.integers(n))
            resp = oracle.query(start)
            stats.tries += 1
            walk = Walk(graph, table, start)
            if resp.label == 1:
                # A biased start ends the walk at once; keep a terminal record of it.
                state = walk.state(oracle.spent / limit, 0.0)
                dist = dist_to_nearest_untested_bias(graph, start, walk.tested_set)
                r = step_reward([1], dist, params)
                transitions.append(Transition(state, start, r, state, (), True, h[start], None))
                stats.successes += 1
                stats.try_steps.append(0)
                stats.try_success.append(True)
                continue
            state = walk.state(oracle.spent / limit, 0.0)
            candidates = walk.candidates()
            success = False
            while walk.steps < config.max_steps and candidates:
                action = select_action(qnet, state, candidates, table, eps, rng)
                resp = oracle.query(action)
                walk.add(action)
                label = resp.label
                dist = dist_to_nearest_untested_bias(graph, action, walk.tested_set)
                r = step_reward([label], dist, params)
                next_state = walk.state(oracle.spent / limit, walk.steps / config.max_steps)
                candidates = walk.candidates()
                terminal = label == 1 or walk.steps >= config.max_steps
                transitions.append(
                    Transition(state, action, r, next_state, tuple(candidates), terminal, h[action], h[candidates])
                )
                state = next_state
                if label == 1:
                    success = True
                    break
            stats.successes += success
            stats.total_steps += walk.steps
            stats.try_steps.append(walk.steps if success else config.max_steps)
            stats.try_success.append(success)
    except BudgetExhausted:
        stats.budget_exhausted = True
        log.info("episode %d stopped early: oracle budget exhausted", episode_index)
    stats.queries = oracle.spent - spent0
    return transitions, stats


@dataclass
class TrainResult:
    qnet: QNetwork
    log: list[dict]

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def default_oracle_factory(graph: KnowledgeGraph, features, config: TrainConfig) -> Callable[[], SimulatedOracle]:
    limit = config.n_tries * (config.max_steps + 1)
    return lambda: SimulatedOracle(graph.labels, features, limit)


def train(graph: KnowledgeGraph, oracle_factory, config: TrainConfig, table, qnet: QNetwork | None = None) -> TrainResult:
    """Run ``config.n_episodes`` episodes, updating the Q-network after each.

    ``oracle_factory()`` must return a fresh oracle; one is used per episode.
    The collected buffer is replayed in collection order, ``batch_size``
    transitions per gradient step.
    """
    if not graph.has_labels:
        raise ConfigError("training needs ground-truth labels on the graph")
    if qnet is None:
        qnet = QNetwork.init(table.d_out, derive_seed(config.seed, "train.qnet"), config.hidden)
    rng = substream(config.seed, "train")
    records = []
    for episode in range(config.n_episodes):
        oracle = oracle_factory()
        transitions, stats = run_episode(graph, oracle, table, qnet, episode, config, rng)
        errors = []
        for i in range(0, len(transitions), config.batch_size):
            errors.append(td_update(qnet, transitions[i : i + config.batch_size], config.eta, config.gamma))
        td_error = float(np.mean(errors)) if errors else 0.0
        if not np.isfinite(td_error) or not qnet.is_finite():
            raise TrainingDiverged(episode, "Q-network update produced non-finite values", unit="episode")
        records.append(
            {
                "episode": episode,
                "epsilon": config.epsilon(episode),
                "success_rate": stats.success_rate,
                "mean_steps_to_bias": stats.mean_steps_to_bias,
                "queries": stats.queries,
                "transitions": len(transitions),
                "td_error": td_error,
            }
        )
        if episode % 50 == 0 or episode == config.n_episodes - 1:
            log.info(
                "episode %d eps=%.3f success=%.2f steps=%.1f td=%.4f",
                episode, records[-1]["epsilon"], stats.success_rate, stats.mean_steps_to_bias, td_error,
            )
    qnet.meta = {
        "episodes_completed": config.n_episodes,
        "final_epsilon": config.epsilon(config.n_episodes - 1),
        "gamma": config.gamma,
        "eta": config.eta,
        "max_steps": config.max_steps,
        "seed": config.seed,
    }
    return TrainResult(qnet, records)
