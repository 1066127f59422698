"""Synthetic hierarchical topic graphs with diffused bias labels and features."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import KnowledgeGraph, save_graph
from .oracle import save_features
from .rng import substream


@dataclass(frozen=True)
class GenParams:
    n_nodes: int = 300
    branching: float = 3.0
    cross_link_prob: float = 0.1
    n_bias_seeds: int = 5
    transmission_rate: float = 0.5
    diffusion_hops: int = 2
    feature_dim: int = 32
    signal: float = 3.0
    noise: float = 1.0
    depth_buckets: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        if self.branching < 1:
            raise ConfigError("branching must be >= 1")
        if not 0.0 <= self.cross_link_prob <= 1.0:
            raise ConfigError(f"cross_link_prob must lie in [0, 1], got {self.cross_link_prob}")
        if not 0.0 <= self.transmission_rate <= 1.0:
            raise ConfigError(f"transmission_rate must lie in [0, 1], got {self.transmission_rate}")
        if not 0 <= self.n_bias_seeds <= self.n_nodes:
            raise ConfigError("n_bias_seeds must lie in [0, n_nodes]")
        if self.diffusion_hops < 0:
            raise ConfigError("diffusion_hops must be >= 0")
        if self.signal < 0 or self.noise < 0:
            raise ConfigError("signal and noise must be non-negative")
        if self.feature_dim < 1 or self.depth_buckets < 1:
            raise ConfigError("feature_dim and depth_buckets must be >= 1")

    def replace(self, **changes) -> "GenParams":
        return dataclasses.replace(self, **changes)


# Named parameter bundles mirroring six evaluation tasks; only the bias
# process differs between them.
PRESETS = {
    "default": GenParams(),
    "suite": GenParams(n_nodes=1000, n_bias_seeds=5, transmission_rate=0.6, diffusion_hops=2),
    "economy": GenParams(n_bias_seeds=4, transmission_rate=0.4),
    "education": GenParams(n_bias_seeds=3, transmission_rate=0.5),
    "immigration": GenParams(n_bias_seeds=6, transmission_rate=0.6),
    "politics": GenParams(n_bias_seeds=8, transmission_rate=0.7),
    "ai": GenParams(n_bias_seeds=3, transmission_rate=0.3),
    "culture": GenParams(n_bias_seeds=5, transmission_rate=0.5),
}


def preset(name: str, **overrides) -> GenParams:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown task preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides)


def gen_graph(params: GenParams, rng: np.random.Generator | None = None) -> KnowledgeGraph:
    """Random hierarchy plus cross links; connected by construction.

    Node i > 0 picks its parent uniformly from a window of earlier nodes that
    ends at its heap-order parent ``(i - 1) // branching``, so internal
    nodes have about ``branching`` children and depth grows like
    log_branching(n). Each node then adds one extra edge to a uniform random
    other node with probability ``cross_link_prob``.
    """
    if rng is None:
        rng = substream(params.seed, "datagen.graph")
    n = params.n_nodes
    b = params.branching
    adj = [set() for _ in range(n)]
    for i in range(1, n):
        hi = int((i - 1) // b)
        lo = hi - hi // 2
        parent = int(rng.integers(lo, hi + 1))
        adj[i].add(parent)
        adj[parent].add(i)
    if n > 1 and params.cross_link_prob > 0:
        coins = rng.random(n)
        targets = rng.integers(0, n - 1, size=n)
        for v in range(n):
            if coins[v] < params.cross_link_prob:
                u = int(targets[v])
                u = u + 1 if u >= v else u  # uniform over the other n-1 nodes
                adj[v].add(u)
                adj[u].add(v)
    return KnowledgeGraph(adj)


def plant_bias(graph: KnowledgeGraph, params: GenParams, rng: np.random.Generator) -> np.ndarray:
    """Seed bias uniformly, then diffuse it along edges for ``diffusion_hops`` hops.

    Every directed edge gets one uniform coin up front; bias crosses the edge
    when the coin is below ``transmission_rate``. Using the same stream with a
    larger rate therefore yields a superset of biased nodes.
    """
    n = graph.node_count
    labels = np.zeros(n, dtype=np.int8)
    seeds = rng.choice(n, size=params.n_bias_seeds, replace=False) if params.n_bias_seeds else []
    adj = graph.adjacency
    coins = [rng.random(len(nb)) for nb in adj]
    frontier = sorted(int(s) for s in seeds)
    for v in frontier:
        labels[v] = 1
    for _ in range(params.diffusion_hops):
        nxt = []
        for v in frontier:
            for u, c in zip(adj[v], coins[v]):
                if not labels[u] and c < params.transmission_rate:
                    labels[u] = 1
                    nxt.append(u)
        frontier = nxt
    return labels


def bias_direction(dim: int) -> np.ndarray:
    u = np.zeros(dim)
    u[0] = 1.0
    return u


def gen_features(graph: KnowledgeGraph, labels, params: GenParams, rng: np.random.Generator) -> np.ndarray:
    """Depth-bucket base vector + signal * label * u + noise * N(0, I).

    Base vectors are orthogonal to ``u``.
    """
    d = params.feature_dim
    depth = graph.depths(0)
    bucket = np.clip(depth, 0, params.depth_buckets - 1)
    u = bias_direction(d)
    base = rng.normal(size=(params.depth_buckets, d))
    base -= np.outer(base @ u, u)  # hierarchy lives orthogonal to the bias direction
    noise = rng.normal(size=(graph.node_count, d))
    labels = np.asarray(labels, dtype=np.float64)
    return base[bucket] + params.signal * labels[:, None] * u + params.noise * noise


@dataclass
class Dataset:
    graph: KnowledgeGraph  # labeled
    features: np.ndarray
    params: GenParams

    @property
    def labels(self) -> np.ndarray:
        return self.graph.labels


def generate(params: GenParams) -> Dataset:
    g = gen_graph(params, substream(params.seed, "datagen.graph"))
    labels = plant_bias(g, params, substream(params.seed, "datagen.bias"))
    features = gen_features(g, labels, params, substream(params.seed, "datagen.features"))
    return Dataset(g.with_labels(labels), features, params)


DATA_FILES = ("edges.tsv", "labels.tsv", "features.tsv", "manifest.json")


def write_dataset(ds: Dataset, out_dir, force: bool = False, extra_manifest: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in DATA_FILES]
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(f"{existing[0]} exists; pass --force to overwrite")
    save_graph(ds.graph, paths[0], paths[1])
    save_features(ds.features, paths[2])
    manifest = {"kind": "dataset", "gen_params": dataclasses.asdict(ds.params), "seed": ds.params.seed}
    if extra_manifest:
        manifest.update(extra_manifest)
    paths[3].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_dataset(data_dir) -> Dataset:
    from .graph import load_graph
    from .oracle import load_features

    d = Path(data_dir)
    g = load_graph(d / "edges.tsv", d / "labels.tsv")
    features = load_features(d / "features.tsv")
    params = GenParams()
    manifest_path = d / "manifest.json"
    if manifest_path.exists():
        params = GenParams(**json.loads(manifest_path.read_text(encoding="utf-8"))["gen_params"])
    return Dataset(g, features, params)
