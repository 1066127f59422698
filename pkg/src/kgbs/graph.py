"""Immutable topic graph, TSV I/O and the bias-distance query used for shaping."""

from __future__ import annotations

from collections import deque
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ParseError, StateError, ValidationError


class _Infinite:
    """Sentinel for "no qualifying node is reachable"."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFINITE"

    def __reduce__(self):
        return (_Infinite, ())


INFINITE = _Infinite()


class KnowledgeGraph:
    """Undirected adjacency over dense integer node ids.

    Neighbor lists are sorted tuples, symmetric, free of self-loops and
    duplicates. ``labels`` is an int8 array of 0/1 or ``None``.
    """

    __slots__ = ("_adj", "_labels", "_titles", "_bias_dist")

    def __init__(self, adjacency: Sequence[Sequence[int]], labels=None, titles: Mapping[int, str] | None = None):
        adj = tuple(tuple(sorted(set(int(u) for u in nb))) for nb in adjacency)
        n = len(adj)
        for v, nb in enumerate(adj):
            for u in nb:
                if u < 0 or u >= n:
                    raise ValidationError(f"edge {v}-{u} references unknown node {u}")
                if u == v:
                    raise ValidationError(f"self-loop on node {v}")
        for v, nb in enumerate(adj):
            for u in nb:
                if v not in adj[u]:
                    raise ValidationError(f"asymmetric adjacency: {u} in nb({v}) but not vice versa")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int8).copy()
            if labels.shape != (n,):
                raise ValidationError(f"expected {n} labels, got shape {labels.shape}")
            if np.any((labels != 0) & (labels != 1)):
                raise ValidationError("labels must be 0 or 1")
            labels.setflags(write=False)
        self._adj = adj
        self._labels = labels
        self._titles = dict(titles) if titles else {}
        self._bias_dist = None

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable[tuple[int, int]], labels=None, titles=None):
        adj = [set() for _ in range(n_nodes)]
        for a, b in edges:
            a, b = int(a), int(b)
            if not (0 <= a < n_nodes and 0 <= b < n_nodes):
                raise ValidationError(f"edge {a}-{b} references a node outside [0, {n_nodes})")
            if a == b:
                raise ValidationError(f"self-loop on node {a}")
            adj[a].add(b)
            adj[b].add(a)
        return cls(adj, labels=labels, titles=titles)

    @property
    def node_count(self) -> int:
        return len(self._adj)

    @property
    def labels(self):
        return self._labels

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def titles(self) -> dict[int, str]:
        return dict(self._titles)

    @property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        return self._adj

    def edge_count(self) -> int:
        return sum(len(nb) for nb in self._adj) // 2

    def edges(self) -> list[tuple[int, int]]:
        """Each undirected edge once, as ``(low, high)``, sorted."""
        return [(v, u) for v, nb in enumerate(self._adj) for u in nb if u > v]

    def label(self, v: int) -> int:
        if self._labels is None:
            raise StateError("graph has no ground-truth labels")
        return int(self._labels[v])

    def bias_nodes(self) -> frozenset[int]:
        if self._labels is None:
            raise StateError("graph has no ground-truth labels")
        return frozenset(int(v) for v in np.flatnonzero(self._labels))

    def with_labels(self, labels) -> "KnowledgeGraph":
        return KnowledgeGraph(self._adj, labels=labels, titles=self._titles)

    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self._adj], dtype=np.int64)

    def depths(self, root: int = 0) -> np.ndarray:
        """Hop distance from ``root``; unreachable nodes get -1."""
        depth = np.full(self.node_count, -1, dtype=np.int64)
        if self.node_count == 0:
            return depth
        depth[root] = 0
        queue = deque([root])
        while queue:
            v = queue.popleft()
            for u in self._adj[v]:
                if depth[u] < 0:
                    depth[u] = depth[v] + 1
                    queue.append(u)
        return depth

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        if self._adj != other._adj or self._titles != other._titles:
            return False
        if (self._labels is None) != (other._labels is None):
            return False
        return self._labels is None or bool(np.array_equal(self._labels, other._labels))

    def __hash__(self):
        return hash(self._adj)

    def __repr__(self):
        return f"KnowledgeGraph(nodes={self.node_count}, edges={self.edge_count()}, labeled={self.has_labels})"


def neighbors(g: KnowledgeGraph, v: int) -> list[int]:
    if not 0 <= v < g.node_count:
        raise DomainError(f"node {v} out of range [0, {g.node_count})")
    return list(g.adjacency[v])


def _bias_distance_field(g: KnowledgeGraph) -> np.ndarray:
    # Multi-source BFS from every bias node; cached on the (immutable) graph.
    if g._bias_dist is None:
        dist = np.full(g.node_count, -1, dtype=np.int64)
        queue = deque()
        for v in np.flatnonzero(g.labels):
            dist[v] = 0
            queue.append(int(v))
        adj = g.adjacency
        while queue:
            v = queue.popleft()
            for u in adj[v]:
                if dist[u] < 0:
                    dist[u] = dist[v] + 1
                    queue.append(u)
        g._bias_dist = dist
    return g._bias_dist


def dist_to_nearest_untested_bias(g: KnowledgeGraph, source: int, tested=()):
    """Hop count from ``source`` to the closest bias node outside ``tested``.

    Returns ``INFINITE`` when no such node is reachable.
    """
    if not g.has_labels:
        raise StateError("dist requires ground truth labels")
    if not 0 <= source < g.node_count:
        raise DomainError(f"node {source} out of range [0, {g.node_count})")
    labels = g.labels
    # Fast path: nothing tested is biased, so the precomputed field is exact.
    if not any(labels[v] for v in tested):
        d = int(_bias_distance_field(g)[source])
        return INFINITE if d < 0 else d
    tested = set(tested)
    if labels[source] and source not in tested:
        return 0
    seen = {source}
    frontier = [source]
    depth = 0
    adj = g.adjacency
    while frontier:
        depth += 1
        nxt = []
        for v in frontier:
            for u in adj[v]:
                if u in seen:
                    continue
                if labels[u] and u not in tested:
                    return depth
                seen.add(u)
                nxt.append(u)
        frontier = nxt
    return INFINITE


def _read_tsv(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def _parse_int(path, lineno, text):
    try:
        value = int(text.strip())
    except ValueError:
        raise ParseError(path, lineno, f"expected an integer, got {text!r}") from None
    if value < 0:
        raise ParseError(path, lineno, f"node ids must be non-negative, got {value}")
    return value


def load_graph(edges_path, labels_path=None, titles_path=None) -> KnowledgeGraph:
    """Read the ``edges.tsv`` / ``labels.tsv`` / ``titles.tsv`` trio.

    Edge direction is discarded. When a labels file is given it defines the
    node set and every edge endpoint must appear in it.
    """
    edges_path = Path(edges_path)
    edges = []
    for lineno, line in _read_tsv(edges_path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(edges_path, lineno, "expected 'parent_id<TAB>child_id'")
        edges.append((_parse_int(edges_path, lineno, parts[0]), _parse_int(edges_path, lineno, parts[1])))

    labels_map = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        labels_map = {}
        for lineno, line in _read_tsv(labels_path):
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(labels_path, lineno, "expected 'node_id<TAB>label'")
            node = _parse_int(labels_path, lineno, parts[0])
            if parts[1].strip() not in ("0", "1"):
                raise ParseError(labels_path, lineno, f"label must be 0 or 1, got {parts[1]!r}")
            if node in labels_map:
                raise ValidationError(f"{labels_path}:{lineno}: duplicate label for node {node}")
            labels_map[node] = int(parts[1])

    titles = {}
    if titles_path is not None:
        titles_path = Path(titles_path)
        for lineno, line in _read_tsv(titles_path):
            node_text, sep, title = line.partition("\t")
            if not sep:
                raise ParseError(titles_path, lineno, "expected 'node_id<TAB>title'")
            titles[_parse_int(titles_path, lineno, node_text)] = title

    if labels_map is not None:
        n = max(labels_map) + 1 if labels_map else 0
        missing = [v for v in range(n) if v not in labels_map]
        if missing:
            raise ValidationError(f"labels are not dense: missing node ids {missing[:5]}")
        for a, b in edges:
            if a >= n or b >= n:
                raise ValidationError(f"edge {a}-{b} references a node with no label (labels cover 0..{n - 1})")
        labels = np.array([labels_map[v] for v in range(n)], dtype=np.int8)
    else:
        ids = [x for e in edges for x in e] + list(titles)
        n = max(ids) + 1 if ids else 0
        labels = None
    for v in titles:
        if v >= n:
            raise ValidationError(f"title for unknown node {v}")
    return KnowledgeGraph.from_edges(n, edges, labels=labels, titles=titles)


def save_graph(g: KnowledgeGraph, edges_path, labels_path=None, titles_path=None) -> None:
    with open(edges_path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in g.edges():
            fh.write(f"{a}\t{b}\n")
    if labels_path is not None:
        if not g.has_labels:
            raise StateError("cannot write labels for an unlabeled graph")
        with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
            for v, y in enumerate(g.labels):
                fh.write(f"{v}\t{int(y)}\n")
    if titles_path is not None:
        with open(titles_path, "w", encoding="utf-8", newline="\n") as fh:
            for v in sorted(g.titles):
                fh.write(f"{v}\t{g.titles[v]}\n")
