"""Multi-agent inference: overlap-penalized greedy agents under a shared query budget.

Agents are passive records; ``AgentLinkHub`` decides which single agent moves
on every tick. All oracle access happens on the scheduling thread.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExhausted, ConfigError
from .metrics import DEFAULT_WIN_THRESHOLD, RunMetrics
from .policy import Walk
from .rng import substream
from .trainer import RewardParams

log = logging.getLogger(__name__)

# Stand-in for "no overlap allowed" in traces and tests.
HUGE_PENALTY = 1e9


@dataclass(frozen=True)
class SwarmConfig:
    n_agents: int = 5
    q_limit: int = 300
    overlap_penalty: float = 1.0
    max_consecutive: int = 5
    max_steps: int = 2000  # normalizes the step fraction in the state, as in training
    reward: RewardParams = field(default_factory=RewardParams)
    win_threshold: float = DEFAULT_WIN_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.q_limit <= self.n_agents:
            raise ConfigError("q_limit must exceed n_agents (every start costs a query)")
        if self.overlap_penalty < 0:
            raise ConfigError("overlap_penalty must be non-negative")
        if self.max_consecutive < 1 or self.max_steps < 1:
            raise ConfigError("max_consecutive and max_steps must be positive")
        if isinstance(self.reward, dict):
            object.__setattr__(self, "reward", RewardParams(**self.reward))

    def replace(self, **changes) -> "SwarmConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class AgentState:
    id: int
    walk: Walk  # every node this agent has tested; moves go to untested neighbors of it
    tested: set[int] = field(default_factory=set)
    steps: int = 0  # moves since the last (re)start
    consecutive_moves: int = 0
    reward_accrued: float = 0.0
    queries_used: int = 0
    restarts: int = 0

    @property
    def current(self) -> int:
        return self.walk.current

    @property
    def efficiency(self) -> float:
        return self.reward_accrued / max(1, self.queries_used)


@dataclass(frozen=True)
class Discovery:
    node: int
    tick: int
    agent: int


class BiasNodeSet:
    def __init__(self):
        self.found: list[Discovery] = []
        self._nodes: set[int] = set()

    def add(self, node: int, tick: int, agent: int) -> bool:
        if node in self._nodes:
            return False
        self._nodes.add(node)
        self.found.append(Discovery(node, tick, agent))
        return True

    def __contains__(self, node) -> bool:
        return node in self._nodes

    def __len__(self) -> int:
        return len(self.found)

    def nodes(self) -> list[int]:
        return [d.node for d in self.found]


def penalized_q(qnet, state, candidate: int, table, others_tested, overlap_penalty: float) -> float:
    q = float(qnet.values(state, table.h[[candidate]])[0])
    return q - overlap_penalty * (candidate in others_tested)


@dataclass(frozen=True)
class Move:
    agent: AgentState
    action: int
    penalized_q: float


class AgentLinkHub:
    """Sequential scheduler choosing which agent moves next.

    Agents are ranked in a priority queue by their best overlap-penalized
    Q-value. The top agent moves unless it has already moved
    ``max_consecutive`` times in a row or its best move targets a node some
    other agent tested; then agents are tried in order of reward per query
    and the first whose best move is untaken moves.
    """

    def __init__(self, agents, qnet, table, config: SwarmConfig):
        self.agents: list[AgentState] = list(agents)
        self.qnet = qnet
        self.table = table
        self.config = config
        self.tested_by: dict[int, set[int]] = {}
        self.last_mover: int | None = None
        for a in self.agents:
            for v in a.tested:
                self.tested_by.setdefault(v, set()).add(a.id)

    def record_test(self, agent: AgentState, v: int) -> None:
        agent.tested.add(v)
        self.tested_by.setdefault(v, set()).add(agent.id)

    def taken_by_other(self, agent: AgentState, v: int) -> bool:
        owners = self.tested_by.get(v)
        return bool(owners) and (len(owners) > 1 or agent.id not in owners)

    def best_move(self, agent: AgentState, budget_frac: float):
        """(action, penalized Q) of the agent's greedy choice, or None at a dead end."""
        candidates = agent.walk.candidates(exclude=agent.tested)
        if not candidates:
            return None
        state = agent.walk.state(budget_frac, agent.steps / self.config.max_steps)
        values = self.qnet.values(state, self.table.h[candidates])
        taken = np.fromiter((self.taken_by_other(agent, c) for c in candidates), dtype=bool, count=len(candidates))
        values = values - self.config.overlap_penalty * taken
        best = values.max()
        action = min(c for c, q in zip(candidates, values) if q == best)
        return action, float(best)

    def select_best_agent(self, budget_frac: float):
        """The next ``Move``, or None when no agent can make an untaken move."""
        best = {a.id: self.best_move(a, budget_frac) for a in self.agents}
        by_id = {a.id: a for a in self.agents}
        heap = [(-mv[1], aid) for aid, mv in best.items() if mv is not None]
        if not heap:
            return None
        heapq.heapify(heap)
        _, top_id = heapq.heappop(heap)
        top = by_id[top_id]
        top_action, top_q = best[top_id]
        streak = top.consecutive_moves if self.last_mover == top_id else 0
        exhausted = streak >= self.config.max_consecutive
        if not exhausted and not self.taken_by_other(top, top_action):
            return Move(top, top_action, top_q)
        order = sorted(self.agents, key=lambda a: (-a.efficiency, a.id))
        if exhausted:
            order = [a for a in order if a.id != top_id] + [top]
        for agent in order:
            mv = best[agent.id]
            if mv is not None and not self.taken_by_other(agent, mv[0]):
                return Move(agent, mv[0], mv[1])
        return None

    def note_move(self, agent: AgentState) -> None:
        if self.last_mover == agent.id:
            agent.consecutive_moves += 1
        else:
            for a in self.agents:
                a.consecutive_moves = 0
            agent.consecutive_moves = 1
        self.last_mover = agent.id


@dataclass
class InferResult:
    found: BiasNodeSet
    metrics: RunMetrics
    trace: list[dict]
    agents: list[AgentState]

    def trace_lines(self) -> list[str]:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.trace]
        final = {"final": True, "found": self.found.nodes(), "metrics": self.metrics.to_record()}
        lines.append(json.dumps(final, sort_keys=True))
        return lines

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")


class _Search:
    """Shared bookkeeping for inference and the walk-based baselines."""

    def __init__(self, graph, oracle, table, config: SwarmConfig, rng):
        self.graph = graph
        self.oracle = oracle
        self.table = table
        self.config = config
        self.rng = rng
        self.queried: set[int] = set()
        self.found = BiasNodeSet()
        self.trace: list[dict] = []
        self.tick = 0
        self.spent = 0

    @property
    def budget_left(self) -> int:
        return self.config.q_limit - self.spent

    def budget_frac(self) -> float:
        return min(1.0, self.spent / self.config.q_limit)

    def query(self, v: int):
        # q_limit is enforced here as well, so remote oracles with larger budgets obey it
        if v not in self.queried and self.spent >= self.config.q_limit:
            raise BudgetExhausted(v, self.spent, self.config.q_limit)
        resp = self.oracle.query(v)
        self.queried.add(v)
        self.spent += resp.cost
        return resp

    def fresh_node(self):
        n = self.graph.node_count
        if len(self.queried) >= n:
            return None
        for _ in range(64):
            v = int(self.rng.integers(n))
            if v not in self.queried:
                return v
        pool = [v for v in range(n) if v not in self.queried]
        return pool[int(self.rng.integers(len(pool)))]

    def charge(self, agent: AgentState, resp) -> None:
        agent.queries_used += resp.cost
        if resp.cost:
            agent.reward_accrued -= self.config.reward.alpha

    def place(self, agent: AgentState | None, agent_id: int, on_test=None) -> AgentState | None:
        """Start (or restart) an agent on fresh nodes until one is unbiased.

        Biased start nodes are recorded as discoveries. Returns None when the
        budget or the graph runs out.
        """
        while True:
            v = self.fresh_node()
            if v is None:
                return None
            resp = self.query(v)
            if agent is None:
                agent = AgentState(agent_id, Walk(self.graph, self.table, v))
            else:
                # the agent keeps every node it tested; a restart adds a new
                # seed to that set and resets only the step counter
                agent.walk.add(v)
                agent.steps = 0
                agent.restarts += 1
                agent.consecutive_moves = 0
            self.charge(agent, resp)
            if on_test is not None:
                on_test(agent, v)
            else:
                agent.tested.add(v)
            if resp.label != 1:
                return agent
            if self.found.add(v, self.tick, agent_id):
                agent.reward_accrued += self.config.reward.beta
            self.trace.append(
                {"tick": self.tick, "agent": agent_id, "from": None, "to": v, "label": 1,
                 "penalized_q": None, "budget_left": self.budget_left}
            )

    def metrics(self, started: float) -> RunMetrics:
        planted = self.graph.bias_nodes() if self.graph.has_labels else set()
        found = self.found.nodes()
        if not planted:
            return RunMetrics(0.0, self.spent, float("inf") if not found else self.spent / len(found),
                              False, self.config.seed, len(found), 0, time.perf_counter() - started)
        return RunMetrics.compute(found, planted, self.spent, self.config.seed, self.config.win_threshold,
                                  time.perf_counter() - started)


def infer(graph, oracle, table, qnet, config: SwarmConfig) -> InferResult:
    """Run the hub until the budget is spent or the graph is exhausted.

    When no agent has an untaken move, every agent restarts from a fresh
    random node (the restart consumes budget like any first visit).
    """
    started = time.perf_counter()
    search = _Search(graph, oracle, table, config, substream(config.seed, "infer"))
    agents: list[AgentState] = []
    hub = AgentLinkHub([], qnet, table, config)
    try:
        for i in range(config.n_agents):
            agent = search.place(None, i, hub.record_test)
            if agent is None:
                break
            agents.append(agent)
            hub.agents.append(agent)
        while agents and search.budget_left > 0:
            move = hub.select_best_agent(search.budget_frac())
            if move is None:
                log.debug("tick %d: no agent can move; restarting all agents", search.tick)
                if any(search.place(a, a.id, hub.record_test) is None for a in agents):
                    break
                hub.last_mover = None
                continue
            agent, action = move.agent, move.action
            origin = agent.current
            resp = search.query(action)
            search.tick += 1
            hub.note_move(agent)
            agent.walk.add(action)
            agent.steps += 1
            hub.record_test(agent, action)
            search.charge(agent, resp)
            search.trace.append(
                {"tick": search.tick, "agent": agent.id, "from": origin, "to": action, "label": resp.label,
                 "penalized_q": move.penalized_q, "budget_left": search.budget_left}
            )
            if resp.label == 1:
                if search.found.add(action, search.tick, agent.id):
                    agent.reward_accrued += config.reward.beta
                if search.place(agent, agent.id, hub.record_test) is None:
                    break
    except BudgetExhausted:
        log.debug("budget exhausted at tick %d", search.tick)
    return InferResult(search.found, search.metrics(started), search.trace, agents)


def greedy_single(graph, oracle, table, qnet, config: SwarmConfig) -> InferResult:
    """One agent, plain argmax-Q moves, no scheduler."""
    started = time.perf_counter()
    search = _Search(graph, oracle, table, config, substream(config.seed, "infer"))
    try:
        agent = search.place(None, 0)
        while agent is not None and search.budget_left > 0:
            candidates = agent.walk.candidates(exclude=agent.tested)
            if not candidates:
                agent = search.place(agent, 0)
                continue
            state = agent.walk.state(search.budget_frac(), agent.steps / config.max_steps)
            values = qnet.values(state, table.h[candidates])
            best = values.max()
            action = min(c for c, q in zip(candidates, values) if q == best)
            origin = agent.current
            resp = search.query(action)
            search.tick += 1
            agent.walk.add(action)
            agent.steps += 1
            agent.tested.add(action)
            search.charge(agent, resp)
            search.trace.append(
                {"tick": search.tick, "agent": 0, "from": origin, "to": action, "label": resp.label,
                 "penalized_q": float(best), "budget_left": search.budget_left}
            )
            if resp.label == 1:
                if search.found.add(action, search.tick, 0):
                    agent.reward_accrued += config.reward.beta
                agent = search.place(agent, 0)
    except BudgetExhausted:
        pass
    return InferResult(search.found, search.metrics(started), search.trace, [])


def uniform_search(graph, oracle, table, config: SwarmConfig) -> InferResult:
    """Agents take turns testing a uniformly random untested neighbor of their walk."""
    started = time.perf_counter()
    search = _Search(graph, oracle, table, config, substream(config.seed, "infer"))
    agents: list[AgentState] = []
    try:
        for i in range(config.n_agents):
            agent = search.place(None, i)
            if agent is None:
                break
            agents.append(agent)
        turn = 0
        while agents and search.budget_left > 0:
            agent = agents[turn % len(agents)]
            turn += 1
            candidates = agent.walk.candidates(exclude=search.queried)
            if not candidates:
                if search.place(agent, agent.id) is None:
                    break
                continue
            action = candidates[int(search.rng.integers(len(candidates)))]
            origin = agent.current
            resp = search.query(action)
            search.tick += 1
            agent.walk.add(action)
            agent.steps += 1
            agent.tested.add(action)
            search.charge(agent, resp)
            search.trace.append(
                {"tick": search.tick, "agent": agent.id, "from": origin, "to": action, "label": resp.label,
                 "penalized_q": None, "budget_left": search.budget_left}
            )
            if resp.label == 1:
                search.found.add(action, search.tick, agent.id)
                if search.place(agent, agent.id) is None:
                    break
    except BudgetExhausted:
        pass
    return InferResult(search.found, search.metrics(started), search.trace, agents)


def dfs_search(graph, oracle, config: SwarmConfig) -> InferResult:
    """Stack-based depth-first traversal from a random start, testing every visited node.

    When the reachable component is exhausted the traversal restarts from a
    fresh random node.
    """
    started = time.perf_counter()
    search = _Search(graph, oracle, None, config, substream(config.seed, "infer"))
    adj = graph.adjacency
    try:
        while search.budget_left > 0:
            start = search.fresh_node()
            if start is None:
                break
            stack = [start]
            while stack and search.budget_left > 0:
                v = stack.pop()
                if v in search.queried:
                    continue
                resp = search.query(v)
                search.tick += 1
                search.trace.append(
                    {"tick": search.tick, "agent": 0, "from": None, "to": v, "label": resp.label,
                     "penalized_q": None, "budget_left": search.budget_left}
                )
                if resp.label == 1:
                    search.found.add(v, search.tick, 0)
                # reversed so the smallest neighbor id is explored first
                stack.extend(u for u in reversed(adj[v]) if u not in search.queried)
    except BudgetExhausted:
        pass
    return InferResult(search.found, search.metrics(started), search.trace, [])
