"""Two-layer hyperbolic graph convolution for semi-supervised node labelling.

Each layer runs three steps on the hyperboloid:

1. feature transform: ``exp0(W log0(x))`` followed by a bias added in the
   origin tangent space,
2. aggregation of neighbours in the tangent space of the centre node with
   symmetric-normalised adjacency weights,
3. a nonlinearity applied in the origin tangent space while moving from the
   layer's curvature to the next one.

All trainables are Euclidean. Curvatures are ``softplus(rho)`` so plain
gradient descent on ``(W, b, rho)`` is enough. Per-epoch cost is linear in
the number of graph edges.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import hyperbolic as hyp
from ._binio import expect_eof, read_array, read_magic, read_u64, write_array, write_magic, write_u64
from .knngraph import FeatureGraph, normalize_adjacency
from .vocab import Vocabulary

log = logging.getLogger(__name__)

HGCN_MAGIC = b"LHGC1\n"
UNLABELED = -1
MAX_COORD = 300.0
LOGIT_SCALE = 3.0
DTYPE = hyp.DTYPE


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class HgcnParams:
    """Layer weights ``W[l]`` (out x in), biases ``b[l]`` and curvatures.

    ``curvatures[l]`` is the curvature layer ``l`` operates in; the last entry is
    the curvature of the output manifold, so there is one more curvature than
    layers.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    curvatures: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or len(self.curvatures) != len(self.weights) + 1:
            raise ValueError("need one bias per layer and n_layers + 1 curvatures")
        for W, b in zip(self.weights, self.biases):
            if W.shape[0] != b.shape[0]:
                raise ValueError("bias length must match layer output width")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError("parameters must be finite")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("layer widths do not chain")
        if any(not (k > 0 and math.isfinite(k)) for k in self.curvatures):
            raise ValueError("curvatures must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]


@dataclass(frozen=True)
class LabelSet:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        lab = labels[labels != UNLABELED]
        if np.any((lab < 0) | (lab >= self.n_classes)):
            raise ValueError("class ids must lie in [0, n_classes)")
        missing = set(range(self.n_classes)) - set(lab.tolist())
        if missing:
            raise ValueError(f"classes without a labelled node: {sorted(missing)[:5]}")
        object.__setattr__(self, "labels", labels)

    @property
    def labeled(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.0
    epochs: int = 200
    weight_decay: float = 5e-4
    seed: int = 0


def init_params(
    in_dim: int, n_classes: int, hidden: int = 32, n_layers: int = 2, seed: int = 0, out_bias: float = 0.5
) -> HgcnParams:
    """Xavier-uniform weights, unit curvatures, zero hidden biases.

    The output layer's bias starts at ``out_bias``: with a rectified readout a
    class unit that starts negative for every node never receives gradient.
    """
    rng = np.random.default_rng(seed)
    widths = [in_dim] + [hidden] * (n_layers - 1) + [n_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    biases[-1] += out_bias
    return HgcnParams(tuple(weights), tuple(biases), (1.0,) * (n_layers + 1))


# --- reparameterisation ------------------------------------------------------


def _inv_softplus(k: float) -> float:
    return k + math.log(-math.expm1(-k))


def to_raw(params: HgcnParams) -> list[torch.Tensor]:
    """Flat list of leaf tensors: W_0, b_0, W_1, b_1, ..., rho_0..rho_L."""
    raw = []
    for W, b in zip(params.weights, params.biases):
        raw += [torch.tensor(W, dtype=DTYPE), torch.tensor(b, dtype=DTYPE)]
    raw += [torch.tensor(_inv_softplus(k), dtype=DTYPE) for k in params.curvatures]
    return raw


def from_raw(raw: Sequence[torch.Tensor], n_layers: int) -> HgcnParams:
    weights = tuple(raw[2 * i].detach().numpy().copy() for i in range(n_layers))
    biases = tuple(raw[2 * i + 1].detach().numpy().copy() for i in range(n_layers))
    curv = tuple(float(F.softplus(r.detach())) for r in raw[2 * n_layers:])
    return HgcnParams(weights, biases, curv)


# --- layer operations (tensor level) -------------------------------------------


def _pad(v: torch.Tensor) -> torch.Tensor:
    return torch.cat([torch.zeros_like(v[..., :1]), v], dim=-1)


def _cap(v: torch.Tensor, k) -> torch.Tensor:
    """Shrink origin tangent vectors so the mapped point has x0 <= MAX_COORD.

    The Minkowski form of a point with time coordinate x0 carries a float64
    rounding error of order eps * x0^2, so bounding x0 keeps every layer output
    on the hyperboloid to ~1e-11 whatever curvature training reaches. The
    bound on the norm is sqrt(k) * acosh(MAX_COORD / sqrt(k)); shorter vectors
    pass unchanged.
    """
    sk = torch.sqrt(torch.as_tensor(k, dtype=DTYPE))
    limit = sk * torch.acosh(torch.clamp_min(MAX_COORD / sk, 2.0))
    n = torch.sqrt(torch.clamp_min((v**2).sum(dim=-1, keepdim=True), hyp._MIN_NORM**2))
    return v * torch.clamp(limit / n, max=1.0)


def _recap(x: torch.Tensor, k) -> torch.Tensor:
    """Pull hyperboloid points beyond the coordinate bound back along their origin geodesic."""
    return hyp.expmap0(_pad(_cap(hyp.logmap0(x, k)[..., 1:], k)), k)


def linear_t(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor, k) -> torch.Tensor:
    h = hyp.expmap0(_pad(_cap(hyp.logmap0(x, k)[..., 1:] @ W.T, k)), k)
    return hyp.expmap0(_pad(_cap(hyp.logmap0(h, k)[..., 1:] + b, k)), k)


def aggregate_t(x: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor, w: torch.Tensor, k) -> torch.Tensor:
    """Weighted tangent-space mean at each centre node ``rows`` over ``cols``."""
    tangents = hyp.logmap(x.index_select(0, cols), x.index_select(0, rows), k) * w[:, None]
    agg = torch.zeros_like(x).index_add(0, rows, tangents)
    # normalised weights need not sum to one, so the mean can land past the bound
    return _recap(hyp.expmap(hyp.proj_tan(agg, x, k), x, k), k)


def activation_t(x: torch.Tensor, k_in, k_out, act: str = "relu") -> torch.Tensor:
    v = hyp.logmap0(x, k_in)[..., 1:]
    if act == "relu":
        v = torch.relu(v)
    elif act != "identity":
        raise ValueError(f"unknown activation {act!r}")
    return hyp.expmap0(_pad(_cap(v, k_out)), k_out)


def _graph_tensors(g: FeatureGraph) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if g.self_weights is None:
        g = normalize_adjacency(g)
    rows, cols, w = g.edge_arrays()
    return torch.as_tensor(rows), torch.as_tensor(cols), torch.as_tensor(w, dtype=DTYPE)


def forward_t(
    raw: Sequence[torch.Tensor],
    graph: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    X: torch.Tensor,
    n_layers: int,
    acts: Sequence[str] = ("relu", "relu"),
    trace: list | None = None,
) -> torch.Tensor:
    rows, cols, w = graph
    ks = [F.softplus(r) for r in raw[2 * n_layers:]]
    x = hyp.expmap0(_pad(X), ks[0])
    if trace is not None:
        trace.append(("lift", ks[0], x))
    for layer in range(n_layers):
        W, b, k = raw[2 * layer], raw[2 * layer + 1], ks[layer]
        x = linear_t(x, W, b, k)
        if trace is not None:
            trace.append((f"linear{layer}", k, x))
        x = aggregate_t(x, rows, cols, w, k)
        if trace is not None:
            trace.append((f"aggregate{layer}", k, x))
        x = activation_t(x, k, ks[layer + 1], acts[layer])
        if trace is not None:
            trace.append((f"activation{layer}", ks[layer + 1], x))
    return LOGIT_SCALE * hyp.logmap0(x, ks[-1])[..., 1:]


# --- public numpy-level operations ---------------------------------------------


def _as_t(a) -> torch.Tensor:
    return torch.tensor(np.asarray(a, dtype=np.float64))


def hgcn_linear(x: hyp.HPoint, W: np.ndarray, b: np.ndarray, k: float | None = None) -> hyp.HPoint:
    k = x.k if k is None else k
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != x.dim or np.shape(b) != (W.shape[0],):
        raise ValueError(f"W {W.shape} / b {np.shape(b)} do not fit a point of dim {x.dim}")
    out = linear_t(_as_t(x.coords), _as_t(W), _as_t(b), k)
    return hyp.HPoint(out.numpy(), k)


def hgcn_aggregate(node: int, features: Sequence[hyp.HPoint], g: FeatureGraph, k: float | None = None) -> hyp.HPoint:
    k = features[node].k if k is None else k
    if g.self_weights is None:
        g = normalize_adjacency(g)
    nbrs = np.concatenate([[node], g.neighbors(node)])
    w = np.concatenate([[g.self_weights[node]], g.neighbor_weights(node)])
    x = _as_t(np.stack([features[j].coords for j in nbrs]))
    rows = torch.zeros(len(nbrs), dtype=torch.long)
    out = aggregate_t(x, rows, torch.arange(len(nbrs)), _as_t(w), k)
    return hyp.HPoint(out[0].numpy(), k)


def hgcn_activation(x: hyp.HPoint, k_in: float, k_out: float, act: str = "relu") -> hyp.HPoint:
    if x.k != k_in:
        raise ValueError("point curvature differs from k_in")
    return hyp.HPoint(activation_t(_as_t(x.coords), k_in, k_out, act).numpy(), k_out)


def hgcn_forward(
    params: HgcnParams, g: FeatureGraph, X: np.ndarray, acts: Sequence[str] = ("relu", "relu"), trace: list | None = None
) -> np.ndarray:
    """Euclidean logits (n_nodes x n_classes)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (g.n_nodes, params.in_dim):
        raise ValueError(f"X has shape {X.shape}, expected ({g.n_nodes}, {params.in_dim})")
    with torch.no_grad():
        logits = forward_t(to_raw(params), _graph_tensors(g), _as_t(X), params.n_layers, acts, trace)
    return logits.numpy()


def loss_t(raw, graph, X, labels: LabelSet, n_layers: int, weight_decay: float, acts=("relu", "relu")) -> torch.Tensor:
    logits = forward_t(raw, graph, X, n_layers, acts)
    idx = torch.as_tensor(labels.labeled)
    loss = F.cross_entropy(logits[idx], torch.as_tensor(labels.labels[labels.labeled]))
    if weight_decay:
        loss = loss + 0.5 * weight_decay * sum((raw[2 * i] ** 2).sum() for i in range(n_layers))
    return loss


def loss_and_grad(
    params: HgcnParams, g: FeatureGraph, X: np.ndarray, seeds: LabelSet, weight_decay: float = 0.0, acts=("relu", "relu")
) -> tuple[float, list[np.ndarray]]:
    """Training loss and its gradient w.r.t. the raw parameters (W, b, rho)."""
    raw = [r.requires_grad_() for r in to_raw(params)]
    loss = loss_t(raw, _graph_tensors(g), _as_t(X), seeds, params.n_layers, weight_decay, acts)
    grads = torch.autograd.grad(loss, raw)
    return float(loss.detach()), [gr.numpy() for gr in grads]


def raw_loss(
    raw_values: Sequence[np.ndarray], n_layers: int, g: FeatureGraph, X: np.ndarray, seeds: LabelSet,
    weight_decay: float = 0.0, acts=("relu", "relu"),
) -> float:
    """Loss as a function of raw parameter arrays (for finite-difference checks)."""
    raw = [torch.tensor(np.asarray(r, dtype=np.float64)) for r in raw_values]
    with torch.no_grad():
        return float(loss_t(raw, _graph_tensors(g), _as_t(X), seeds, n_layers, weight_decay, acts))


def hgcn_train(
    g: FeatureGraph,
    X: np.ndarray,
    seeds: LabelSet,
    cfg: TrainConfig = TrainConfig(),
    hidden: int = 32,
    params: HgcnParams | None = None,
    acts: Sequence[str] = ("relu", "relu"),
) -> tuple[HgcnParams, list[float]]:
    """Full-batch gradient descent on cross-entropy over the labelled nodes.

    Returns the trained parameters and the loss before every update plus the
    final loss (``epochs + 1`` values).
    """
    X = np.asarray(X, dtype=np.float64)
    if params is None:
        params = init_params(X.shape[1], seeds.n_classes, hidden=hidden, n_layers=len(acts), seed=cfg.seed)
    n_layers = params.n_layers
    graph = _graph_tensors(g)
    Xt = _as_t(X)
    raw = [r.requires_grad_() for r in to_raw(params)]
    history: list[float] = []
    for epoch in range(cfg.epochs + 1):
        loss = loss_t(raw, graph, Xt, seeds, n_layers, cfg.weight_decay, acts)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at epoch {epoch} (lr={cfg.lr}); lower the learning rate")
        history.append(value)
        if epoch == cfg.epochs:
            break
        grads = torch.autograd.grad(loss, raw)
        with torch.no_grad():
            for r, gr in zip(raw, grads):
                r -= cfg.lr * gr
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6f", epoch, value)
    return from_raw(raw, n_layers), history


def hgcn_predict(params: HgcnParams, g: FeatureGraph, X: np.ndarray, acts=("relu", "relu")) -> np.ndarray:
    return np.argmax(hgcn_forward(params, g, X, acts), axis=1)


# --- seeding and centroids -----------------------------------------------------


def seed_labels(X: np.ndarray, n_clusters: int, strategy: str = "farthest-point", seed: int = 0, start: int | None = None) -> LabelSet:
    """Farthest-point sampling; seed ``c`` becomes the only node labelled ``c``."""
    if strategy != "farthest-point":
        raise ValueError(f"unknown seeding strategy {strategy!r}")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 0 < n_clusters <= n:
        raise ValueError(f"n_clusters={n_clusters} must lie in [1, {n}]")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    labels = np.full(n, UNLABELED, dtype=np.int64)
    chosen = [start]
    labels[start] = 0
    mind = ((X - X[start]) ** 2).sum(axis=1)
    mind[start] = -1.0
    for c in range(1, n_clusters):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        labels[nxt] = c
        mind = np.minimum(mind, ((X - X[nxt]) ** 2).sum(axis=1))
        mind[chosen] = -1.0
    return LabelSet(labels, n_clusters)


def extract_centroids(X: np.ndarray, predicted: np.ndarray) -> Vocabulary:
    """Per-class Euclidean means; classes nobody was assigned to are dropped."""
    X = np.asarray(X, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.int64)
    classes, inverse, counts = np.unique(predicted, return_inverse=True, return_counts=True)
    sums = np.zeros((classes.size, X.shape[1]))
    np.add.at(sums, inverse, X)
    return Vocabulary(sums / counts[:, None], source_classes=classes)


# --- persistence ---------------------------------------------------------------


def save_params(params: HgcnParams, path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, HGCN_MAGIC)
        write_u64(fh, params.n_layers)
        for W, b in zip(params.weights, params.biases):
            write_u64(fh, *W.shape)
            write_array(fh, W, "f8")
            write_array(fh, b, "f8")
        write_array(fh, np.asarray(params.curvatures), "f8")


def load_params(path: str | Path) -> HgcnParams:
    with open(path, "rb") as fh:
        read_magic(fh, HGCN_MAGIC, path)
        (n_layers,) = read_u64(fh, 1, path)
        weights, biases = [], []
        for _ in range(n_layers):
            out_dim, in_dim = read_u64(fh, 2, path)
            weights.append(read_array(fh, "f8", (out_dim, in_dim), path))
            biases.append(read_array(fh, "f8", (out_dim,), path))
        curv = read_array(fh, "f8", (n_layers + 1,), path)
        expect_eof(fh, path)
    return HgcnParams(tuple(weights), tuple(biases), tuple(float(k) for k in curv))


def save_training_log(history: Sequence[float], path: str | Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v!r}\n")
