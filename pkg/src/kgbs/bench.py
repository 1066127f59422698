"""Baselines, ablations and agent-count sweeps over seeded synthetic suites.

A suite is a list of seeds. For each seed the dataset is regenerated from
the task preset, embeddings and the Q-network are trained once per
embedding mode, and every requested variant is run against a fresh oracle
with the same query budget. Per-run traces go to ``runs/*.jsonl``; the
aggregate is a CSV plus plot-ready TSVs under ``plots/``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, generate, preset
from .embedding import ATTENTION, FROZEN, SELF_ONLY, UNIFORM, EmbeddingHyper, EmbeddingTable, train_embeddings
from .errors import ConfigError, StateError
from .metrics import DEFAULT_WIN_THRESHOLD, RunMetrics, bncr
from .oracle import SimulatedOracle
from .swarm import SwarmConfig, dfs_search, greedy_single, infer, uniform_search
from .trainer import TrainConfig, default_oracle_factory, train

__all__ = [
    "ABLATIONS", "BASELINES", "VARIANTS", "BenchConfig", "RunMetrics", "Suite", "bncr",
    "check_budget", "run_ablation", "run_baseline", "run_suite", "summarize", "sweep_agents",
]

log = logging.getLogger(__name__)

BASELINES = ("dfs", "uniform", "no_penalty", "greedy_q_only")
# ablation -> embedding mode; everything downstream is unchanged
ABLATIONS = {"no_sage": SELF_ONLY, "no_attention": UNIFORM, "neither": FROZEN}
VARIANTS = ("full",) + BASELINES + tuple(ABLATIONS)

CSV_FIELDS = ("variant", "n_agents", "seed", "bncr", "interactions", "step_loss", "win")


@dataclass(frozen=True)
class BenchConfig:
    """Desk-scale defaults: 1,000-node suite graphs, 5 agents, 300 queries."""

    task: str = "suite"
    seeds: tuple[int, ...] = tuple(range(10))
    embedding: EmbeddingHyper = field(default_factory=lambda: EmbeddingHyper(epochs=300))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(n_episodes=100, n_tries=20, max_steps=60))
    swarm: SwarmConfig = field(default_factory=lambda: SwarmConfig(max_steps=60))
    per_node_cost: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("bench needs at least one seed")
        preset(self.task)  # validates the name
        if self.per_node_cost < 1:
            raise ConfigError("per_node_cost must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def _run(kind: str, graph, oracle, table, qnet, config: SwarmConfig):
    if kind == "full":
        return infer(graph, oracle, table, qnet, config)
    if kind == "no_penalty":
        return infer(graph, oracle, table, qnet, config.replace(overlap_penalty=0.0))
    if kind == "greedy_q_only":
        return greedy_single(graph, oracle, table, qnet, config)
    if kind == "uniform":
        return uniform_search(graph, oracle, table, config)
    if kind == "dfs":
        return dfs_search(graph, oracle, config)
    raise ConfigError(f"unknown variant {kind!r}; choose from {list(VARIANTS)}")


def run_baseline(kind: str, graph, oracle, table, qnet, config: SwarmConfig) -> RunMetrics:
    """Run one baseline (or "full") against ``oracle`` under ``config.q_limit``."""
    if kind not in BASELINES and kind != "full":
        raise ConfigError(f"unknown baseline {kind!r}; choose from {list(BASELINES)}")
    return _run(kind, graph, oracle, table, qnet, config).metrics


def run_ablation(kind: str, dataset: Dataset, embedding: EmbeddingHyper, train_config: TrainConfig,
                 config: SwarmConfig, oracle=None) -> RunMetrics:
    """Retrain the pipeline with the ablated embedding and run full inference."""
    try:
        mode = ABLATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown ablation {kind!r}; choose from {sorted(ABLATIONS)}") from None
    g = dataset.graph
    emb = train_embeddings(g, dataset.features, g.labels, dataclasses.replace(embedding, mode=mode))
    qnet = train(g, default_oracle_factory(g, dataset.features, train_config), train_config, emb.table).qnet
    if oracle is None:
        oracle = SimulatedOracle(g.labels, dataset.features, config.q_limit)
    return infer(g, oracle, emb.table, qnet, config).metrics


def check_budget(metrics: RunMetrics, oracle: SimulatedOracle, q_limit: int) -> None:
    """Fairness check: spending is exactly per-node cost times distinct nodes, within q_limit."""
    expected = oracle.per_node_cost * len(set(oracle.cache))
    if oracle.spent != expected:
        raise StateError(f"oracle spent {oracle.spent} but {len(oracle.cache)} distinct nodes cost {expected}")
    if oracle.spent > q_limit or metrics.interactions > q_limit:
        raise StateError(f"run spent {oracle.spent} over q_limit {q_limit}")
    if metrics.interactions != oracle.spent:
        raise StateError(f"metrics report {metrics.interactions} interactions, oracle charged {oracle.spent}")


class Suite:
    """Datasets and trained models per (seed, embedding mode), built lazily and reused."""

    def __init__(self, config: BenchConfig):
        self.config = config
        self._data: dict[int, Dataset] = {}
        self._models: dict[tuple[int, str], tuple] = {}

    def dataset(self, seed: int) -> Dataset:
        if seed not in self._data:
            self._data[seed] = generate(preset(self.config.task, seed=seed))
        return self._data[seed]

    def models(self, seed: int, mode: str = ATTENTION):
        key = (seed, mode)
        if key not in self._models:
            ds = self.dataset(seed)
            g = ds.graph
            hyper = dataclasses.replace(self.config.embedding, seed=seed, mode=mode)
            emb = train_embeddings(g, ds.features, g.labels, hyper)
            tcfg = self.config.train.replace(seed=seed)
            qnet = train(g, default_oracle_factory(g, ds.features, tcfg), tcfg, emb.table).qnet
            log.info("seed %d: trained %s pipeline", seed, mode)
            self._models[key] = (emb.table, qnet)
        return self._models[key]

    def run(self, variant: str, seed: int, n_agents: int | None = None):
        """(RunMetrics, trace lines) for one variant on one seed."""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
        ds = self.dataset(seed)
        swarm = self.config.swarm.replace(seed=seed)
        if n_agents is not None:
            swarm = swarm.replace(n_agents=n_agents)
        mode = ABLATIONS.get(variant, ATTENTION)
        kind = "full" if variant in ABLATIONS else variant
        if variant in ("dfs", "uniform"):
            # no model involved; the uniform walk only keeps raw rows for its state bookkeeping
            table, qnet = EmbeddingTable(ds.features, ds.features), None
        else:
            table, qnet = self.models(seed, mode)
        oracle = SimulatedOracle(ds.graph.labels, ds.features, swarm.q_limit, self.config.per_node_cost)
        result = _run(kind, ds.graph, oracle, table, qnet, swarm)
        check_budget(result.metrics, oracle, swarm.q_limit)
        return result.metrics, result.trace_lines()


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return "inf" if math.isinf(x) else repr(x)
    return str(x)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(rows: list[dict], fields, delimiter=",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def _row(variant: str, n_agents: int, m: RunMetrics) -> dict:
    return {"variant": variant, "n_agents": n_agents, "seed": m.seed, "bncr": m.bncr,
            "interactions": m.interactions, "step_loss": m.step_loss, "win": m.win}


def summarize(rows: list[dict], key: str = "variant") -> list[dict]:
    """Mean/stdev of bncr, mean interactions and step_loss, and win rate per group."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for k, rs in groups.items():
        b = np.array([r["bncr"] for r in rs])
        out.append({
            key: k,
            "runs": len(rs),
            "mean_bncr": float(b.mean()),
            "std_bncr": float(b.std()),
            "mean_interactions": float(np.mean([r["interactions"] for r in rs])),
            "mean_step_loss": float(np.mean([r["step_loss"] for r in rs])),
            "win_rate": float(np.mean([r["win"] for r in rs])),
        })
    return out


def _write_runs(out: Path, runs: dict) -> None:
    for name, lines in sorted(runs.items()):
        _write_text(out / "runs" / f"{name}.jsonl", "".join(line + "\n" for line in lines))


def run_suite(variants, config: BenchConfig, out_dir=None, suite: Suite | None = None) -> list[dict]:
    """Run every variant on every seed; rows are sorted by (variant order, seed)."""
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {list(VARIANTS)}")
    suite = suite or Suite(config)
    rows, runs = [], {}
    for v in variants:
        for seed in sorted(config.seeds):
            m, lines = suite.run(v, seed)
            rows.append(_row(v, config.swarm.n_agents, m))
            runs[f"{v}-n{config.swarm.n_agents}-s{seed}"] = lines
            log.info("%s seed %d: bncr=%.3f interactions=%d", v, seed, m.bncr, m.interactions)
    if out_dir is not None:
        out = Path(out_dir)
        _write_runs(out, runs)
        _write_text(out / "results.csv", _csv_text(rows, CSV_FIELDS))
        summary = summarize(rows)
        _write_text(out / "plots" / "bncr_by_variant.tsv", _csv_text(summary, list(summary[0]), "\t"))
    return rows


def sweep_agents(n_agents_list, config: BenchConfig, out_dir=None, suite: Suite | None = None):
    """Full-model runs for each agent count on identical graphs, models and budgets.

    Returns (per-run rows, table rows of n_agents / mean_step_loss / win_rate / mean_bncr).
    """
    counts = sorted(set(int(n) for n in n_agents_list))
    if not counts or counts[0] < 1:
        raise ConfigError("agent counts must be positive")
    suite = suite or Suite(config)
    rows, runs = [], {}
    for n in counts:
        for seed in sorted(config.seeds):
            m, lines = suite.run("full", seed, n_agents=n)
            rows.append(_row("full", n, m))
            runs[f"sweep-n{n}-s{seed}"] = lines
    table = [
        {"n_agents": s["n_agents"], "mean_step_loss": s["mean_step_loss"], "win_rate": s["win_rate"],
         "mean_bncr": s["mean_bncr"]}
        for s in summarize(rows, key="n_agents")
    ]
    if out_dir is not None:
        out = Path(out_dir)
        _write_runs(out, runs)
        _write_text(out / "sweep.csv", _csv_text(rows, CSV_FIELDS))
        _write_text(out / "plots" / "sweep_agents.tsv",
                    _csv_text(table, ["n_agents", "mean_step_loss", "win_rate", "mean_bncr"], "\t"))
    return rows, table


def bench_manifest(config: BenchConfig, **extra) -> str:
    d = {"kind": "bench", "config": config.to_dict(), "win_threshold_default": DEFAULT_WIN_THRESHOLD,
         "step_loss": "interactions / found bias nodes (inf when none found)"}
    d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
