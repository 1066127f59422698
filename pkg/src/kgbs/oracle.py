"""Black-box topic oracle with query budget accounting.

``SimulatedOracle`` answers from ground truth. ``RemoteOracle`` speaks the
line-delimited JSON protocol to any backend process, and ``serve`` is the
matching server loop, so a real model-under-test can be dropped in without
touching the search engine::

    -> {"op": "query", "node": 5}
    <- {"label": 1, "features": [0.1, ...], "cost": 1}
    -> {"op": "remaining"}
    <- {"remaining": 97}

Run ``python -m kgbs.oracle --labels labels.tsv --features features.tsv
--limit 1000`` to serve a simulated oracle over stdin/stdout.
"""

from __future__ import annotations

import argparse
import json
import struct
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import BudgetExhausted, DomainError, KgbsError, ParseError, ValidationError


@dataclass(frozen=True)
class OracleResponse:
    label: int
    features: np.ndarray
    cost: int


class Oracle(Protocol):
    def query(self, v: int) -> OracleResponse: ...

    def remaining(self) -> int: ...


@dataclass
class QueryBudget:
    limit: int
    spent: int = 0

    def __post_init__(self):
        if self.limit < 0:
            raise ValidationError(f"budget limit must be non-negative, got {self.limit}")

    @property
    def remaining(self) -> int:
        return self.limit - self.spent

    def charge(self, units: int) -> None:
        # Callers check affordability first; this guards the invariant.
        assert self.spent + units <= self.limit, "budget overdraft"
        self.spent += units


class SimulatedOracle:
    """Ground-truth oracle charging ``per_node_cost`` on the first query of a node.

    Repeat queries are served from the cache at zero cost.
    """

    def __init__(self, labels, feature_table, limit: int, per_node_cost: int = 1):
        labels = np.asarray(labels, dtype=np.int8)
        features = np.asarray(feature_table, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ValidationError(
                f"feature table shape {features.shape} does not match {labels.shape[0]} labels"
            )
        if per_node_cost < 0:
            raise ValidationError("per_node_cost must be non-negative")
        self._labels = labels
        self._features = features.copy()
        self._features.setflags(write=False)
        self.budget = QueryBudget(int(limit))
        self.per_node_cost = int(per_node_cost)
        self._cache: dict[int, None] = {}  # insertion-ordered set

    @property
    def dim(self) -> int:
        return self._features.shape[1]

    @property
    def node_count(self) -> int:
        return self._labels.shape[0]

    @property
    def spent(self) -> int:
        return self.budget.spent

    @property
    def limit(self) -> int:
        return self.budget.limit

    @property
    def cache(self) -> tuple[int, ...]:
        """Queried nodes in first-query order."""
        return tuple(self._cache)

    def is_cached(self, v: int) -> bool:
        return v in self._cache

    def can_afford(self, v: int) -> bool:
        return v in self._cache or self.budget.spent + self.per_node_cost <= self.budget.limit

    def query(self, v: int) -> OracleResponse:
        v = int(v)
        if not 0 <= v < self.node_count:
            raise DomainError(f"node {v} out of range [0, {self.node_count})")
        if v in self._cache:
            cost = 0
        else:
            if self.budget.spent + self.per_node_cost > self.budget.limit:
                raise BudgetExhausted(v, self.budget.spent, self.budget.limit)
            cost = self.per_node_cost
            self.budget.charge(cost)
            self._cache[v] = None
        return OracleResponse(int(self._labels[v]), self._features[v], cost)

    def remaining(self) -> int:
        return self.budget.remaining

    def fresh(self, limit: int | None = None) -> "SimulatedOracle":
        """Same ground truth, empty cache and ledger."""
        return SimulatedOracle(
            self._labels, self._features, self.budget.limit if limit is None else limit, self.per_node_cost
        )


def serve(oracle, instream, outstream) -> None:
    """Answer protocol requests from ``instream`` until EOF."""
    for raw in instream:
        raw = raw.strip()
        if not raw:
            continue
        try:
            request = json.loads(raw)
            op = request.get("op")
            if op == "query":
                resp = oracle.query(int(request["node"]))
                reply = {"label": resp.label, "features": [float(x) for x in resp.features], "cost": resp.cost}
            elif op == "remaining":
                reply = {"remaining": oracle.remaining()}
            else:
                reply = {"error": "bad_request", "message": f"unknown op {op!r}"}
        except BudgetExhausted as exc:
            reply = {"error": "budget_exhausted", "message": str(exc)}
        except DomainError as exc:
            reply = {"error": "domain", "message": str(exc)}
        except (ValueError, KeyError, TypeError) as exc:
            reply = {"error": "bad_request", "message": str(exc)}
        outstream.write(json.dumps(reply) + "\n")
        outstream.flush()


class RemoteOracle:
    """Client side of the line-delimited JSON protocol."""

    def __init__(self, reader, writer, process: subprocess.Popen | None = None):
        self._reader = reader
        self._writer = writer
        self._process = process

    @classmethod
    def spawn(cls, argv) -> "RemoteOracle":
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)
        return cls(proc.stdout, proc.stdin, proc)

    def _call(self, request: dict) -> dict:
        self._writer.write(json.dumps(request) + "\n")
        self._writer.flush()
        line = self._reader.readline()
        if not line:
            raise KgbsError("remote oracle closed the connection")
        reply = json.loads(line)
        error = reply.get("error")
        if error == "budget_exhausted":
            raise BudgetExhausted(request.get("node"), None, None)
        if error == "domain":
            raise DomainError(reply.get("message", "domain error"))
        if error:
            raise KgbsError(f"remote oracle error: {reply.get('message', error)}")
        return reply

    def query(self, v: int) -> OracleResponse:
        reply = self._call({"op": "query", "node": int(v)})
        return OracleResponse(int(reply["label"]), np.asarray(reply["features"], dtype=np.float64), int(reply["cost"]))

    def remaining(self) -> int:
        return int(self._call({"op": "remaining"})["remaining"])

    def close(self) -> None:
        if self._process is not None:
            self._process.stdin.close()
            self._process.wait(timeout=10)
            self._process.stdout.close()
            self._process = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_BIN_MAGIC = b"KGBSFT01"


def save_features(table, path) -> None:
    """Write a feature table as TSV (``node<TAB>f1,...``) or, for ``.bin``, raw float64."""
    table = np.asarray(table, dtype=np.float64)
    path = Path(path)
    if path.suffix == ".bin":
        with open(path, "wb") as fh:
            fh.write(_BIN_MAGIC)
            fh.write(struct.pack("<QQ", *table.shape))
            fh.write(table.astype("<f8").tobytes(order="C"))
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v, row in enumerate(table):
            fh.write(f"{v}\t{','.join(repr(float(x)) for x in row)}\n")


def load_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".bin":
        data = path.read_bytes()
        if data[:8] != _BIN_MAGIC:
            raise ParseError(path, 1, "not a kgbs feature file")
        n, d = struct.unpack("<QQ", data[8:24])
        return np.frombuffer(data[24:], dtype="<f8").reshape(n, d).astype(np.float64)
    rows = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            node_text, sep, values = line.partition("\t")
            if not sep:
                raise ParseError(path, lineno, "expected 'node_id<TAB>f1,f2,...'")
            try:
                node = int(node_text)
                vec = [float(x) for x in values.split(",")]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ParseError(path, lineno, f"expected {dim} features, got {len(vec)}")
            if node in rows:
                raise ValidationError(f"{path}:{lineno}: duplicate features for node {node}")
            rows[node] = vec
    n = max(rows) + 1 if rows else 0
    if len(rows) != n:
        raise ValidationError(f"{path}: feature table is not dense over 0..{n - 1}")
    return np.array([rows[v] for v in range(n)], dtype=np.float64).reshape(n, dim or 0)


def main(argv=None) -> int:
    from .graph import load_graph

    parser = argparse.ArgumentParser(prog="python -m kgbs.oracle", description="Serve a simulated oracle on stdio.")
    parser.add_argument("--edges", required=True)
    parser.add_argument("--labels", required=True)
    parser.add_argument("--features", required=True)
    parser.add_argument("--limit", type=int, required=True)
    parser.add_argument("--per-node-cost", type=int, default=1)
    args = parser.parse_args(argv)
    g = load_graph(args.edges, args.labels)
    oracle = SimulatedOracle(g.labels, load_features(args.features), args.limit, args.per_node_cost)
    serve(oracle, sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
