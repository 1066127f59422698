import numpy as np
import pytest

from conftest import star_graph
from kgbs.datagen import generate, preset
from kgbs.embedding import EmbeddingTable
from kgbs.errors import ConfigError
from kgbs.graph import KnowledgeGraph
from kgbs.oracle import SimulatedOracle
from kgbs.policy import QNetwork, Walk, state_dim
from kgbs.swarm import (
    HUGE_PENALTY, AgentLinkHub, AgentState, SwarmConfig, greedy_single, infer, penalized_q,
)


def first_coord_qnet(d):
    """Q(s, a) = relu(first coordinate of the action embedding)."""
    net = QNetwork.zeros(d, hidden=1)
    net.W1[0, state_dim(d)] = 1.0
    net.W2[0, 0] = 1.0
    net.w3[0] = 1.0
    return net


def value_table(values, d=2):
    h = np.zeros((len(values), d))
    h[:, 0] = values
    return EmbeddingTable(h, h)


def make_agent(hub, graph, table, aid, nodes, efficiency=0.0):
    walk = Walk(graph, table, nodes[0])
    for v in nodes[1:]:
        walk.add(v)
    a = AgentState(aid, walk)
    a.reward_accrued, a.queries_used = efficiency, 1
    hub.agents.append(a)
    for v in nodes:
        hub.record_test(a, v)
    return a


def test_penalized_q_examples():
    net = QNetwork.zeros(2, hidden=2)
    net.b3 = 0.8
    t = value_table([0, 0, 0])
    s = np.zeros(state_dim(2))
    assert penalized_q(net, s, 1, t, set(), 0.5) == pytest.approx(0.8)
    assert penalized_q(net, s, 1, t, {1}, 0.5) == pytest.approx(0.3)
    assert penalized_q(net, s, 1, t, {1}, 0.0) == pytest.approx(0.8)


def test_best_agent_by_q():
    g = KnowledgeGraph.from_edges(4, [(0, 1), (2, 3)], labels=[0] * 4)
    t = value_table([0, 0.9, 0, 0.4])
    hub = AgentLinkHub([], first_coord_qnet(2), t, SwarmConfig(n_agents=2))
    a = make_agent(hub, g, t, 0, [0])
    make_agent(hub, g, t, 1, [2])
    move = hub.select_best_agent(0.0)
    assert move.agent is a and move.action == 1 and move.penalized_q == pytest.approx(0.9)


def test_fallback_to_most_efficient_agent():
    # agent 0's best candidate (node 1) was already tested by agent 1
    g = KnowledgeGraph.from_edges(7, [(0, 1), (1, 2), (2, 3), (4, 5), (5, 6)], labels=[0] * 7)
    t = value_table([0, 0.9, 0, 0.6, 0, 0.3, 0.5])
    hub = AgentLinkHub([], first_coord_qnet(2), t, SwarmConfig(n_agents=3, overlap_penalty=0.1))
    make_agent(hub, g, t, 0, [0], efficiency=5.0)
    make_agent(hub, g, t, 1, [2, 1], efficiency=0.5)
    c = make_agent(hub, g, t, 2, [4], efficiency=2.0)
    move = hub.select_best_agent(0.0)
    # agent 0 tops the queue (0.9 - 0.1) but its move overlaps; agent 2 out-earns agent 1
    assert move.agent is c and move.action == 5


def test_streak_limit_hands_over():
    g = KnowledgeGraph.from_edges(4, [(0, 1), (2, 3)], labels=[0] * 4)
    t = value_table([0, 0.9, 0, 0.4])
    hub = AgentLinkHub([], first_coord_qnet(2), t, SwarmConfig(n_agents=2, max_consecutive=5))
    a = make_agent(hub, g, t, 0, [0])
    b = make_agent(hub, g, t, 1, [2])
    for _ in range(5):
        hub.note_move(a)
    assert hub.select_best_agent(0.0).agent is b
    hub.note_move(b)
    assert a.consecutive_moves == 0 and hub.select_best_agent(0.0).agent is a


def test_no_move_when_everything_is_taken():
    g = KnowledgeGraph.from_edges(3, [(0, 1), (1, 2)], labels=[0] * 3)
    t = value_table([0, 0.9, 0])
    hub = AgentLinkHub([], first_coord_qnet(2), t, SwarmConfig(n_agents=2))
    make_agent(hub, g, t, 0, [0, 1])
    make_agent(hub, g, t, 1, [2, 1])
    assert hub.select_best_agent(0.0) is None


def test_no_bias_spends_exact_budget():
    ds = generate(preset("default", n_nodes=100, seed=1))
    g = ds.graph.with_labels(np.zeros(100))
    oracle = SimulatedOracle(g.labels, ds.features, 20)
    res = infer(g, oracle, EmbeddingTable(ds.features, ds.features), QNetwork.init(32, 0, 8),
                SwarmConfig(n_agents=3, q_limit=20, seed=1))
    assert len(res.found) == 0 and oracle.spent == 20 == res.metrics.interactions


def test_star_with_perfect_q_finds_leaf():
    labels = [0, 0, 0, 1, 0, 0]
    g = star_graph(5, labels=labels)
    t = value_table(labels)
    for seed in range(10):
        res = infer(g, SimulatedOracle(g.labels, t.h, 50), t, first_coord_qnet(2),
                    SwarmConfig(n_agents=1, q_limit=7, seed=seed))
        assert res.found.nodes() == [3]
        idx = next(i for i, r in enumerate(res.trace) if r["label"] == 1)
        assert idx < 5  # at most five moves precede the discovery
        assert 7 - res.trace[idx]["budget_left"] <= 6


@pytest.fixture(scope="module")
def world():
    ds = generate(preset("default", n_nodes=300, seed=2))
    t = EmbeddingTable(ds.features, ds.features)
    return ds, t, QNetwork.init(32, seed=5, hidden=16)


def test_single_agent_reduces_to_greedy(world):
    ds, t, net = world
    cfg = SwarmConfig(n_agents=1, q_limit=120, seed=3, max_steps=60)
    a = infer(ds.graph, SimulatedOracle(ds.labels, ds.features, 120), t, net, cfg)
    b = greedy_single(ds.graph, SimulatedOracle(ds.labels, ds.features, 120), t, net, cfg)
    assert a.trace_lines() == b.trace_lines()


def test_invariants_and_determinism(world):
    ds, t, net = world
    cfg = SwarmConfig(n_agents=4, q_limit=150, overlap_penalty=HUGE_PENALTY, seed=4, max_steps=60)
    oracle = SimulatedOracle(ds.labels, ds.features, 150)
    res = infer(ds.graph, oracle, t, net, cfg)
    moves = [r for r in res.trace if r["from"] is not None]
    assert len({r["to"] for r in moves}) == len(moves)  # nobody re-tests a node
    assert [r["tick"] for r in moves] == list(range(1, len(moves) + 1))  # one agent per tick
    assert oracle.spent == len(oracle.cache) == res.metrics.interactions <= 150
    assert all(ds.labels[v] == 1 for v in res.found.nodes())
    again = infer(ds.graph, SimulatedOracle(ds.labels, ds.features, 150), t, net, cfg)
    assert again.trace_lines() == res.trace_lines()


def test_restart_keeps_history(world):
    ds, t, net = world
    res = infer(ds.graph, SimulatedOracle(ds.labels, ds.features, 200), t, net,
                SwarmConfig(n_agents=2, q_limit=200, seed=6, max_steps=60))
    restarted = [a for a in res.agents if a.restarts]
    assert restarted
    for a in restarted:
        assert a.tested == a.walk.tested_set and a.steps <= a.walk.steps


def test_trace_file(world, tmp_path):
    import json

    ds, t, net = world
    res = infer(ds.graph, SimulatedOracle(ds.labels, ds.features, 60), t, net,
                SwarmConfig(n_agents=2, q_limit=60, seed=7))
    res.write_trace(tmp_path / "trace.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert lines[-1]["final"] and lines[-1]["metrics"]["interactions"] <= 60
    assert all(r["budget_left"] >= 0 for r in lines[:-1])


def test_config_validation():
    with pytest.raises(ConfigError):
        SwarmConfig(n_agents=0)
    with pytest.raises(ConfigError):
        SwarmConfig(n_agents=5, q_limit=5)
