"""Attention-weighted one-hop neighbor aggregation and the bias classifier.

Each node embedding is

    h_i = relu( sum_j a_ij * W_h x_j  +  W_r x_i )

with a_ij a softmax over the neighbors j of i of the compatibility score
``leaky_relu(attn . [W_h x_i || W_h x_j])``. A logistic classifier on h is
trained by full-batch gradient descent on cross-entropy; all gradients are
derived by hand below.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, StateError, TrainingDiverged, ValidationError

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
STABLE_LEARNING_RATE = 0.1
CHECKPOINT_VERSION = 1

# Aggregation modes. The last three exist for ablations.
ATTENTION = "attention"
UNIFORM = "uniform"  # neighbor term kept, weights 1/|nb(i)|
SELF_ONLY = "self"  # no neighbor term, W_r still trained
FROZEN = "frozen"  # no neighbor term, untrained random projection
MODES = (ATTENTION, UNIFORM, SELF_ONLY, FROZEN)

PARAM_NAMES = ("W_h", "W_r", "attn", "clf_w", "clf_b")


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _sigmoid(z):
    # Split form avoids overflow in exp for large |z|.
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class EmbeddingModel:
    W_h: np.ndarray
    W_r: np.ndarray
    attn: np.ndarray
    clf_w: np.ndarray
    clf_b: float
    mode: str = ATTENTION
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown aggregation mode {self.mode!r}")
        self.W_h = np.asarray(self.W_h, dtype=np.float64)
        self.W_r = np.asarray(self.W_r, dtype=np.float64)
        self.attn = np.asarray(self.attn, dtype=np.float64)
        self.clf_w = np.asarray(self.clf_w, dtype=np.float64)
        self.clf_b = float(self.clf_b)
        d_out, d = self.W_r.shape
        if self.W_h.shape != (d_out, d) or self.attn.shape != (2 * d_out,) or self.clf_w.shape != (d_out,):
            raise ValidationError("inconsistent embedding parameter shapes")

    @property
    def d(self) -> int:
        return self.W_r.shape[1]

    @property
    def d_out(self) -> int:
        return self.W_r.shape[0]

    @classmethod
    def init(cls, d: int, d_out: int, seed: int, mode: str = ATTENTION) -> "EmbeddingModel":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        return cls(
            W_h=rng.uniform(-bound, bound, (d_out, d)),
            W_r=rng.uniform(-bound, bound, (d_out, d)),
            attn=rng.uniform(-bound, bound, 2 * d_out),
            clf_w=rng.uniform(-bound, bound, d_out),
            clf_b=0.0,
            mode=mode,
            seed=seed,
        )

    @classmethod
    def zeros(cls, d: int, d_out: int, mode: str = ATTENTION) -> "EmbeddingModel":
        return cls(np.zeros((d_out, d)), np.zeros((d_out, d)), np.zeros(2 * d_out), np.zeros(d_out), 0.0, mode)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "W_h": self.W_h,
            "W_r": self.W_r,
            "attn": self.attn,
            "clf_w": self.clf_w,
            "clf_b": np.array([self.clf_b]),
        }

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.W_h = np.array(params["W_h"], dtype=np.float64)
        self.W_r = np.array(params["W_r"], dtype=np.float64)
        self.attn = np.array(params["attn"], dtype=np.float64)
        self.clf_w = np.array(params["clf_w"], dtype=np.float64)
        self.clf_b = float(np.asarray(params["clf_b"]).reshape(-1)[0])

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.W_h.copy(), self.W_r.copy(), self.attn.copy(), self.clf_w.copy(), self.clf_b, self.mode, self.seed
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "kind": "embedding",
            "d": self.d,
            "d_out": self.d_out,
            "mode": self.mode,
            "seed": self.seed,
            "W_h": self.W_h.tolist(),
            "W_r": self.W_r.tolist(),
            "attn": self.attn.tolist(),
            "clf_w": self.clf_w.tolist(),
            "clf_b": self.clf_b,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EmbeddingModel":
        if data.get("kind") != "embedding" or data.get("version") != CHECKPOINT_VERSION:
            raise ValidationError("not a version-1 embedding checkpoint")
        model = cls(data["W_h"], data["W_r"], data["attn"], data["clf_w"], data["clf_b"], data["mode"], data["seed"])
        if model.d != data["d"] or model.d_out != data["d_out"]:
            raise ValidationError("checkpoint dimensions disagree with its matrices")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_vec(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise DomainError(f"{what} has shape {x.shape}, expected ({dim},)")
    return x


def attention_coeffs(model: EmbeddingModel, h0_self, h0_neighbors) -> list[float]:
    """Softmax-normalized attention weights of one node over its neighbors.

    An empty neighbor list yields an empty list, meaning "aggregate the node
    on its own".
    """
    h0_self = _check_vec(h0_self, model.d, "self features")
    if len(h0_neighbors) == 0:
        return []
    nbrs = np.stack([_check_vec(x, model.d, "neighbor features") for x in h0_neighbors])
    if model.mode == UNIFORM:
        return [1.0 / len(nbrs)] * len(nbrs)
    d_out = model.d_out
    scores = _leaky(model.attn[:d_out] @ (model.W_h @ h0_self) + (nbrs @ model.W_h.T) @ model.attn[d_out:])
    ex = np.exp(scores - scores.max())
    return list(ex / ex.sum())


def aggregate(model: EmbeddingModel, h0_self, h0_neighbors) -> np.ndarray:
    h0_self = _check_vec(h0_self, model.d, "self features")
    z = model.W_r @ h0_self
    if model.mode in (ATTENTION, UNIFORM) and len(h0_neighbors):
        weights = np.asarray(attention_coeffs(model, h0_self, h0_neighbors))
        nbrs = np.stack([np.asarray(x, dtype=np.float64) for x in h0_neighbors])
        z = z + model.W_h @ (weights @ nbrs)
    return np.maximum(z, 0.0)


def classify(model: EmbeddingModel, h) -> float:
    h = _check_vec(h, model.d_out, "embedding")
    return float(_sigmoid(np.array(model.clf_w @ h + model.clf_b)))


@dataclass(frozen=True)
class EdgeIndex:
    """Directed copy of every undirected edge, grouped by source node."""

    src: np.ndarray
    dst: np.ndarray
    n_nodes: int

    @classmethod
    def from_graph(cls, graph) -> "EdgeIndex":
        adj = graph.adjacency
        counts = np.fromiter((len(nb) for nb in adj), dtype=np.int64, count=len(adj))
        src = np.repeat(np.arange(len(adj), dtype=np.int64), counts)
        dst = np.fromiter((u for nb in adj for u in nb), dtype=np.int64, count=int(counts.sum()))
        return cls(src, dst, len(adj))


@dataclass
class _Forward:
    A: np.ndarray  # W_h x, per node
    alpha: np.ndarray  # per directed edge
    s: np.ndarray  # pre-leaky attention score, per edge
    Z: np.ndarray
    H: np.ndarray
    logits: np.ndarray


def _segment_softmax(scores, src, n):
    seg_max = np.full(n, -np.inf)
    np.maximum.at(seg_max, src, scores)
    ex = np.exp(scores - seg_max[src])
    seg_sum = np.zeros(n)
    np.add.at(seg_sum, src, ex)
    return ex / seg_sum[src]


def _forward(model: EmbeddingModel, X: np.ndarray, edges: EdgeIndex) -> _Forward:
    n = X.shape[0]
    d_out = model.d_out
    A = X @ model.W_h.T
    Z = X @ model.W_r.T
    s = np.zeros(0)
    alpha = np.zeros(0)
    if model.mode in (ATTENTION, UNIFORM) and edges.src.size:
        if model.mode == ATTENTION:
            s = (A @ model.attn[:d_out])[edges.src] + (A @ model.attn[d_out:])[edges.dst]
            alpha = _segment_softmax(_leaky(s), edges.src, n)
        else:
            deg = np.bincount(edges.src, minlength=n).astype(np.float64)
            alpha = 1.0 / deg[edges.src]
        M = np.zeros((n, d_out))
        np.add.at(M, edges.src, alpha[:, None] * A[edges.dst])
        Z = Z + M
    H = np.maximum(Z, 0.0)
    return _Forward(A, alpha, s, Z, H, H @ model.clf_w + model.clf_b)


def embed_all(model: EmbeddingModel, X, graph=None, edges: EdgeIndex | None = None) -> np.ndarray:
    """Embeddings of every node, shape (n, d_out)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DomainError(f"feature table shape {X.shape} does not match model input dim {model.d}")
    if edges is None:
        edges = EdgeIndex.from_graph(graph)
    return _forward(model, X, edges).H


def _cross_entropy(logits, y, weight):
    # log(1 + exp(z)) - y z, stable for either sign of z.
    per = np.logaddexp(0.0, logits) - y * logits
    return float(np.sum(weight * per))


def loss_and_grads(model: EmbeddingModel, X, y, edges: EdgeIndex, weight) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted cross-entropy and its exact gradient for every parameter.

    ``weight`` is a per-node coefficient (1/|train| on training nodes, 0
    elsewhere gives the mean loss over the training split).
    """
    fw = _forward(model, X, edges)
    loss = _cross_entropy(fw.logits, y, weight)
    d_out = model.d_out
    g_logit = weight * (_sigmoid(fw.logits) - y)
    grads = {
        "clf_w": fw.H.T @ g_logit,
        "clf_b": np.array([g_logit.sum()]),
        "W_h": np.zeros_like(model.W_h),
        "attn": np.zeros_like(model.attn),
    }
    dZ = np.outer(g_logit, model.clf_w) * (fw.Z > 0)
    grads["W_r"] = dZ.T @ X
    if model.mode in (ATTENTION, UNIFORM) and edges.src.size:
        src, dst = edges.src, edges.dst
        dA = np.zeros_like(fw.A)
        # message path: M_i = sum_j alpha_ij A_j
        np.add.at(dA, dst, fw.alpha[:, None] * dZ[src])
        if model.mode == ATTENTION:
            d_alpha = np.einsum("ek,ek->e", dZ[src], fw.A[dst])
            weighted = np.zeros(X.shape[0])
            np.add.at(weighted, src, fw.alpha * d_alpha)
            d_e = fw.alpha * (d_alpha - weighted[src])
            d_s = d_e * np.where(fw.s > 0, 1.0, LEAKY_SLOPE)
            a_self, a_nbr = model.attn[:d_out], model.attn[d_out:]
            grads["attn"] = np.concatenate([d_s @ fw.A[src], d_s @ fw.A[dst]])
            d_s_src = np.zeros(X.shape[0])
            d_s_dst = np.zeros(X.shape[0])
            np.add.at(d_s_src, src, d_s)
            np.add.at(d_s_dst, dst, d_s)
            dA += np.outer(d_s_src, a_self) + np.outer(d_s_dst, a_nbr)
        grads["W_h"] = dA.T @ X
    if model.mode == SELF_ONLY:
        grads["W_h"] = np.zeros_like(model.W_h)
    return loss, grads


@dataclass
class EmbeddingTable:
    h0: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.h0 = np.asarray(self.h0, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        self.h.setflags(write=False)
        if self.h0.shape[0] != self.h.shape[0]:
            raise ValidationError("h0 and h disagree on node count")

    @property
    def d_out(self) -> int:
        return self.h.shape[1]

    def __getitem__(self, v) -> np.ndarray:
        return self.h[v]


@dataclass
class EmbeddingHyper:
    d_out: int = 32
    learning_rate: float = STABLE_LEARNING_RATE
    epochs: int = 500
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    mode: str = ATTENTION


@dataclass
class EmbeddingResult:
    model: EmbeddingModel
    table: EmbeddingTable
    losses: list[float] = field(default_factory=list)

    def write_loss_curve(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for epoch, loss in enumerate(self.losses):
                fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")


def train_embeddings(graph, feature_table, labels, hyper: EmbeddingHyper, train_mask=None) -> EmbeddingResult:
    """Fit W_h, W_r, attention and classifier by gradient descent on mean cross-entropy.

    ``train_mask`` restricts the loss to a subset of nodes (every node's
    neighbors still contribute features). Raises ``TrainingDiverged`` on a
    non-finite loss or when the loss rises across a 10-epoch window.
    """
    X = np.asarray(feature_table, dtype=np.float64)
    n = graph.node_count
    if X.shape[0] != n:
        raise StateError(f"missing neighbor features: table has {X.shape[0]} rows for {n} nodes")
    if not np.all(np.isfinite(X)):
        raise StateError("feature table contains non-finite values")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (n,):
        raise StateError("labels must cover every node")
    mask = np.ones(n, dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
    train_idx = np.flatnonzero(mask)
    if train_idx.size == 0:
        raise ValidationError("empty training set")

    edges = EdgeIndex.from_graph(graph)
    model = EmbeddingModel.init(X.shape[1], hyper.d_out, hyper.seed, hyper.mode)
    losses: list[float] = []
    if hyper.mode == FROZEN:
        # Untrained projection: only the classifier is fit, the embedding stays random.
        trainable = ("clf_w", "clf_b")
    else:
        trainable = PARAM_NAMES
    batch_rng = np.random.default_rng([hyper.seed, 1])
    full_weight = np.zeros(n)
    full_weight[train_idx] = 1.0 / train_idx.size

    for epoch in range(hyper.epochs):
        if hyper.batch_size is None or hyper.batch_size >= train_idx.size:
            batches = [full_weight]
        else:
            order = batch_rng.permutation(train_idx)
            batches = []
            for start in range(0, order.size, hyper.batch_size):
                w = np.zeros(n)
                chunk = order[start : start + hyper.batch_size]
                w[chunk] = 1.0 / chunk.size
                batches.append(w)
        for weight in batches:
            _, grads = loss_and_grads(model, X, y, edges, weight)
            params = model.params()
            for name in trainable:
                params[name] = params[name] - hyper.learning_rate * grads[name]
            model.set_params(params)
        loss = _cross_entropy(_forward(model, X, edges).logits, y, full_weight)
        if not np.isfinite(loss) or not model.is_finite():
            raise TrainingDiverged(epoch, "non-finite embedding loss")
        losses.append(loss)
        if epoch >= 10 and loss > losses[epoch - 10] + 1e-12:
            raise TrainingDiverged(
                epoch,
                f"loss rose from {losses[epoch - 10]:.6g} to {loss:.6g} over 10 epochs "
                f"(learning_rate={hyper.learning_rate}; stable default is {STABLE_LEARNING_RATE})",
            )
    log.debug("embedding training done: final loss %.6g after %d epochs", losses[-1] if losses else float("nan"), hyper.epochs)
    H = _forward(model, X, edges).H
    return EmbeddingResult(model, EmbeddingTable(X, H), losses)


def predict_proba(model: EmbeddingModel, table: EmbeddingTable) -> np.ndarray:
    return _sigmoid(table.h @ model.clf_w + model.clf_b)
