"""State summaries, the Q-network, epsilon-greedy selection and the TD(0) update."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .errors import DomainError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_GAMMA = 0.97


def state_dim(d_out: int) -> int:
    return 2 * d_out + 2


def build_state(frontier, graph, table, budget_frac: float, step_frac: float) -> np.ndarray:
    """Fixed-size summary of a walk: [mean h(tested) | mean h(untested nbrs) | budget, steps]."""
    frontier = set(frontier)
    if not frontier:
        raise DomainError("a walk always has at least one tested node")
    if not (0.0 <= budget_frac <= 1.0 and 0.0 <= step_frac <= 1.0):
        raise DomainError("budget_frac and step_frac must lie in [0, 1]")
    h = table.h
    tested = sorted(frontier)
    boundary = sorted({u for v in tested for u in graph.adjacency[v]} - frontier)
    cand = h[boundary].mean(axis=0) if boundary else np.zeros(h.shape[1])
    return np.concatenate([h[tested].mean(axis=0), cand, [budget_frac, step_frac]])


class Walk:
    """Incrementally maintained tested set and untested boundary of one walk.

    Equivalent to ``build_state`` but O(degree) per added node.
    """

    def __init__(self, graph, table, start: int):
        self._adj = graph.adjacency
        self._h = table.h
        self.tested: list[int] = []
        self.tested_set: set[int] = set()
        self.boundary: set[int] = set()
        self._tested_sum = np.zeros(self._h.shape[1])
        self._boundary_sum = np.zeros(self._h.shape[1])
        self.add(start)

    @property
    def current(self) -> int:
        return self.tested[-1]

    @property
    def steps(self) -> int:
        return len(self.tested) - 1

    def add(self, v: int) -> None:
        if v in self.tested_set:
            raise DomainError(f"node {v} already tested in this walk")
        self.tested.append(v)
        self.tested_set.add(v)
        self._tested_sum += self._h[v]
        if v in self.boundary:
            self.boundary.remove(v)
            self._boundary_sum -= self._h[v]
        for u in self._adj[v]:
            if u not in self.tested_set and u not in self.boundary:
                self.boundary.add(u)
                self._boundary_sum += self._h[u]

    def candidates(self, exclude=()) -> list[int]:
        if exclude:
            return sorted(u for u in self.boundary if u not in exclude)
        return sorted(self.boundary)

    def state(self, budget_frac: float, step_frac: float) -> np.ndarray:
        n_b = len(self.boundary)
        cand = self._boundary_sum / n_b if n_b else np.zeros_like(self._boundary_sum)
        return np.concatenate(
            [self._tested_sum / len(self.tested), cand, [min(max(budget_frac, 0.0), 1.0), min(max(step_frac, 0.0), 1.0)]]
        )


def epsilon_at(episode: int, eps0: float = 1.0, decay: float = 0.994, floor: float = 0.2) -> float:
    if episode < 0:
        raise DomainError("episode must be non-negative")
    return max(floor, eps0 * decay**episode)


class QNetwork:
    """Two hidden ReLU layers mapping [state | action embedding] to a scalar."""

    def __init__(self, W1, b1, W2, b2, w3, b3):
        self.W1 = np.asarray(W1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.W2 = np.asarray(W2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.w3 = np.asarray(w3, dtype=np.float64)
        self.b3 = float(b3)
        h1, n_in = self.W1.shape
        if self.b1.shape != (h1,) or self.W2.shape[1] != h1 or self.b2.shape != (self.W2.shape[0],):
            raise ValidationError("inconsistent Q-network layer shapes")
        if self.w3.shape != (self.W2.shape[0],):
            raise ValidationError("inconsistent Q-network output layer")
        self.meta: dict = {}

    @classmethod
    def init(cls, d_out: int, seed: int, hidden: int = 64) -> "QNetwork":
        rng = np.random.default_rng(seed)
        n_in = state_dim(d_out) + d_out

        def layer(fan_out, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, (fan_out, fan_in))

        return cls(layer(hidden, n_in), np.zeros(hidden), layer(hidden, hidden), np.zeros(hidden), layer(1, hidden)[0], 0.0)

    @classmethod
    def zeros(cls, d_out: int, hidden: int = 64) -> "QNetwork":
        n_in = state_dim(d_out) + d_out
        return cls(np.zeros((hidden, n_in)), np.zeros(hidden), np.zeros((hidden, hidden)), np.zeros(hidden), np.zeros(hidden), 0.0)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def action_dim(self) -> int:
        return (self.input_dim - 2) // 3

    @property
    def state_dim(self) -> int:
        return self.input_dim - self.action_dim

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2, "w3": self.w3, "b3": np.array([self.b3])}

    def set_params(self, p: dict) -> None:
        self.W1, self.b1, self.W2, self.b2, self.w3 = (np.array(p[k], dtype=np.float64) for k in ("W1", "b1", "W2", "b2", "w3"))
        self.b3 = float(np.asarray(p["b3"]).reshape(-1)[0])

    def copy(self) -> "QNetwork":
        net = QNetwork(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.w3.copy(), self.b3)
        net.meta = dict(self.meta)
        return net

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params().values())

    def values(self, state, action_embs) -> np.ndarray:
        """Q(state, a) for each row of ``action_embs``."""
        state = np.asarray(state, dtype=np.float64)
        action_embs = np.asarray(action_embs, dtype=np.float64)
        if state.shape != (self.state_dim,) or action_embs.ndim != 2 or action_embs.shape[1] != self.action_dim:
            raise DomainError(
                f"expected state ({self.state_dim},) and actions (k, {self.action_dim}); "
                f"got {state.shape} and {action_embs.shape}"
            )
        s_dim = self.state_dim
        pre1 = (self.W1[:, :s_dim] @ state + self.b1) + action_embs @ self.W1[:, s_dim:].T
        h1 = np.maximum(pre1, 0.0)
        h2 = np.maximum(h1 @ self.W2.T + self.b2, 0.0)
        return h2 @ self.w3 + self.b3

    def forward_inputs(self, X):
        h1 = np.maximum(X @ self.W1.T + self.b1, 0.0)
        h2 = np.maximum(h1 @ self.W2.T + self.b2, 0.0)
        return h1, h2, h2 @ self.w3 + self.b3

    def weighted_grad(self, X, coeffs) -> dict[str, np.ndarray]:
        """Gradient of sum_i coeffs[i] * Q(X[i]) with respect to every parameter."""
        X = np.atleast_2d(X)
        h1, h2, _ = self.forward_inputs(X)
        return self._grad(X, h1, h2, coeffs)

    def _grad(self, X, h1, h2, coeffs) -> dict[str, np.ndarray]:
        coeffs = np.asarray(coeffs, dtype=np.float64)
        d_h2 = np.outer(coeffs, self.w3) * (h2 > 0)
        d_h1 = (d_h2 @ self.W2) * (h1 > 0)
        return {
            "W1": d_h1.T @ X,
            "b1": d_h1.sum(axis=0),
            "W2": d_h2.T @ h1,
            "b2": d_h2.sum(axis=0),
            "w3": coeffs @ h2,
            "b3": np.array([coeffs.sum()]),
        }

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "kind": "qnetwork",
            "layers": [self.input_dim, self.W1.shape[0], self.W2.shape[0], 1],
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.tolist(),
            "b2": self.b2.tolist(),
            "w3": self.w3.tolist(),
            "b3": self.b3,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QNetwork":
        if data.get("kind") != "qnetwork" or data.get("version") != CHECKPOINT_VERSION:
            raise ValidationError("not a version-1 Q-network checkpoint")
        net = cls(data["W1"], data["b1"], data["W2"], data["b2"], data["w3"], data["b3"])
        net.meta = dict(data.get("meta", {}))
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "QNetwork":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def q_value(qnet: QNetwork, state, action_embedding) -> float:
    action_embedding = np.asarray(action_embedding, dtype=np.float64)
    if action_embedding.ndim != 1:
        raise DomainError("action embedding must be a vector")
    return float(qnet.values(state, action_embedding[None, :])[0])


class TabularQ:
    """Lookup-table Q used to check the TD recurrence exactly.

    States are any hashable key (typically the current node id); unseen
    entries read as 0.
    """

    def __init__(self, table: dict | None = None):
        self.table: dict[tuple[Hashable, int], float] = dict(table or {})

    def get(self, state, action) -> float:
        return self.table.get((state, int(action)), 0.0)

    def values(self, state, actions) -> np.ndarray:
        return np.array([self.get(state, a) for a in actions], dtype=np.float64)


@dataclass
class Transition:
    state: object
    action: int
    reward: float
    next_state: object
    next_candidates: tuple[int, ...] = ()
    terminal: bool = False
    action_emb: np.ndarray | None = None
    next_candidate_embs: np.ndarray | None = field(default=None, repr=False)


def _argmax_smallest_id(values, candidates) -> int:
    best = np.max(values)
    return min(c for c, q in zip(candidates, values) if q == best)


def select_action(qnet, state, candidates: Sequence[int], table, eps: float, rng: np.random.Generator):
    """Epsilon-greedy choice among ``candidates``; ``None`` when there is no move.

    One uniform draw is always consumed so the stream stays aligned across
    greedy and exploratory steps.
    """
    if not 0.0 <= eps <= 1.0:
        raise DomainError("eps must lie in [0, 1]")
    if len(candidates) == 0:
        return None
    explore = rng.random() < eps
    if explore:
        return int(candidates[int(rng.integers(len(candidates)))])
    if isinstance(qnet, TabularQ):
        values = qnet.values(state, candidates)
    else:
        values = qnet.values(state, table.h[list(candidates)])
    return _argmax_smallest_id(values, candidates)


def _bootstrap(qnet, t: Transition) -> float:
    if t.terminal or len(t.next_candidates) == 0:
        if not t.terminal:
            log.debug("dead end after action %s treated as terminal", t.action)
        return 0.0
    if isinstance(qnet, TabularQ):
        return float(np.max(qnet.values(t.next_state, t.next_candidates)))
    return float(np.max(qnet.values(t.next_state, t.next_candidate_embs)))


def td_update(qnet, batch: Sequence[Transition], eta: float, gamma: float = DEFAULT_GAMMA) -> float:
    """One semi-gradient step on the summed squared TD error of ``batch``.

    Targets R + gamma * max_a' Q(s', a') use the pre-update parameters. For
    ``TabularQ`` this is exactly Q <- Q + eta * (target - Q). Returns the mean
    absolute TD error before the step. Updates ``qnet`` in place.
    """
    if not 0.0 < gamma <= 1.0:
        raise DomainError("gamma must lie in (0, 1]")
    if not batch:
        return 0.0
    targets = np.array([t.reward + gamma * _bootstrap(qnet, t) for t in batch])
    if isinstance(qnet, TabularQ):
        current = np.array([qnet.get(t.state, t.action) for t in batch])
        deltas = targets - current
        for t, delta in zip(batch, deltas):
            key = (t.state, int(t.action))
            qnet.table[key] = qnet.table.get(key, 0.0) + eta * delta
        return float(np.mean(np.abs(deltas)))
    X = np.stack([np.concatenate([t.state, t.action_emb]) for t in batch])
    h1, h2, current = qnet.forward_inputs(X)
    deltas = targets - current
    grads = qnet._grad(X, h1, h2, deltas)
    # gradient descent on 0.5 * delta^2 moves parameters along +delta * dQ
    qnet.W1 += eta * grads["W1"]
    qnet.b1 += eta * grads["b1"]
    qnet.W2 += eta * grads["W2"]
    qnet.b2 += eta * grads["b2"]
    qnet.w3 += eta * grads["w3"]
    qnet.b3 += eta * float(grads["b3"][0])
    return float(np.mean(np.abs(deltas)))
