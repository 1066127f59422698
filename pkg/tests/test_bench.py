import csv
import math

import numpy as np
import pytest

from kgbs import bench
from kgbs.bench import BenchConfig, Suite, bncr, check_budget, run_ablation, run_baseline, run_suite, sweep_agents
from kgbs.datagen import generate, preset
from kgbs.embedding import EmbeddingHyper, EmbeddingTable
from kgbs.errors import ConfigError, DomainError, StateError
from kgbs.graph import KnowledgeGraph
from kgbs.metrics import RunMetrics
from kgbs.oracle import SimulatedOracle
from kgbs.policy import QNetwork
from kgbs.swarm import SwarmConfig, infer
from kgbs.trainer import TrainConfig


def test_bncr_examples():
    assert bncr(range(9), range(10)) == 0.9
    assert bncr({20}, range(10)) == 0.0
    with pytest.raises(DomainError):
        bncr({1}, set())


def test_run_metrics():
    m = RunMetrics.compute({1, 2}, {1, 2, 3, 4}, 10, seed=3)
    assert m.bncr == 0.5 and m.step_loss == 5.0 and not m.win
    m = RunMetrics.compute(set(), {1}, 10, seed=0)
    assert math.isinf(m.step_loss) and m.to_record()["step_loss"] is None
    assert RunMetrics.compute({1, 2, 3, 4}, {1, 2, 3, 4, 5}, 4, 0).win  # 0.8 is a win


def test_uniform_with_full_budget_finds_everything():
    ds = generate(preset("default", n_nodes=120, seed=5))
    table = EmbeddingTable(ds.features, ds.features)
    n = ds.graph.node_count
    m = run_baseline("uniform", ds.graph, SimulatedOracle(ds.labels, ds.features, n), table, None,
                     SwarmConfig(n_agents=3, q_limit=n, seed=5))
    assert m.bncr == 1.0 and m.interactions == n


def test_dfs_respects_budget():
    ds = generate(preset("default", n_nodes=120, seed=6))
    oracle = SimulatedOracle(ds.labels, ds.features, 40)
    m = run_baseline("dfs", ds.graph, oracle, None, None, SwarmConfig(q_limit=40, seed=1))
    check_budget(m, oracle, 40)
    assert m.interactions == 40


def two_cluster_graph(k=30):
    edges = [(a, b) for c in (0, k) for a in range(c, c + k) for b in range(a + 1, c + k) if (a + b) % 4 == 0]
    edges += [(c + i, c + i + 1) for c in (0, k) for i in range(k - 1)]
    edges.append((k - 1, k))
    labels = np.zeros(2 * k, dtype=int)
    labels[[5, 12, k + 7, k + 20]] = 1
    return KnowledgeGraph.from_edges(2 * k, edges, labels=labels)


def test_penalty_never_reduces_coverage():
    g = two_cluster_graph()
    X = np.random.default_rng(0).normal(size=(g.node_count, 4))
    table = EmbeddingTable(X, X)
    full, plain = [], []
    for seed in range(10):
        net = QNetwork.init(4, seed=seed, hidden=8)
        cfg = SwarmConfig(n_agents=4, q_limit=30, seed=seed)
        for out, c in ((full, cfg), (plain, cfg.replace(overlap_penalty=0.0))):
            res = infer(g, SimulatedOracle(g.labels, X, 30), table, net, c)
            out.append(len({r["to"] for r in res.trace} | {v for a in res.agents for v in a.tested}))
    assert np.mean(full) >= np.mean(plain)


@pytest.fixture(scope="module")
def tiny():
    cfg = BenchConfig(
        task="default", seeds=(0, 1),
        embedding=EmbeddingHyper(epochs=40),
        train=TrainConfig(n_episodes=4, n_tries=5, max_steps=30),
        swarm=SwarmConfig(n_agents=3, q_limit=60, max_steps=30),
    )
    return cfg, Suite(cfg)


def test_suite_outputs_and_determinism(tiny, tmp_path):
    cfg, suite = tiny
    rows = run_suite(["full", "dfs", "uniform"], cfg, tmp_path / "a", suite)
    assert len(rows) == 6
    with open(tmp_path / "a" / "results.csv") as fh:
        table = list(csv.DictReader(fh))
    assert list(table[0]) == list(bench.CSV_FIELDS) and len(table) == 6
    assert all(int(r["interactions"]) <= 60 for r in table)
    run_suite(["full", "dfs", "uniform"], cfg, tmp_path / "b", Suite(cfg))
    for rel in ("results.csv", "plots/bncr_by_variant.tsv", "runs/full-n3-s1.jsonl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_sweep_single_agent_row_equals_greedy(tiny, tmp_path):
    cfg, suite = tiny
    rows, table = sweep_agents([1, 2], cfg, tmp_path, suite)
    assert [r["n_agents"] for r in table] == [1, 2]
    greedy = run_suite(["greedy_q_only"], cfg, None, suite)
    ones = [r for r in rows if r["n_agents"] == 1]
    assert [r["bncr"] for r in ones] == [r["bncr"] for r in greedy]
    assert (tmp_path / "plots" / "sweep_agents.tsv").read_text().startswith("n_agents\tmean_step_loss")


def test_ablation_variants_run(tiny):
    cfg, suite = tiny
    ds = suite.dataset(0)
    m = run_ablation("no_sage", ds, cfg.embedding, cfg.train, cfg.swarm)
    assert 0.0 <= m.bncr <= 1.0 and m.interactions <= cfg.swarm.q_limit
    with pytest.raises(ConfigError):
        run_ablation("no_graph", ds, cfg.embedding, cfg.train, cfg.swarm)
    with pytest.raises(ConfigError):
        run_suite(["full", "oracle"], cfg)


def test_budget_check_detects_mismatch():
    oracle = SimulatedOracle([0, 1, 0], np.zeros((3, 1)), 5)
    oracle.query(0)
    oracle.query(1)
    check_budget(RunMetrics.compute({1}, {1}, 2, 0), oracle, 5)
    with pytest.raises(StateError):
        check_budget(RunMetrics.compute({1}, {1}, 3, 0), oracle, 5)
    with pytest.raises(StateError):
        check_budget(RunMetrics.compute({1}, {1}, 2, 0), oracle, 1)
