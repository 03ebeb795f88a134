"""GCN + MLP cost model with exact manual gradients.

Pipeline: per-node features -> 2 GCN layers (no bias, ReLU) -> per-channel
weighted sum and max over nodes, concatenated -> 3 affine layers (ReLU after
the first two) -> scalar on the z-normalized log2(GFLOPS) scale.

Everything is float64 numpy; gradients are hand-derived reverse mode and are
held to finite differences in the test suite.  The batched entry points
(embed_batch / head paths) exist because the searchers score hundreds of
candidates per round on one core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .graphs import FEATURE_DIM, CodeGraph, GraphTensors, graph_to_tensors

LABEL_FLOOR_GFLOPS = 1e-3  # infeasible measurements train at this floor


@dataclass
class GcnParams:
    layers: list  # weight matrices (d_in, d_out), no biases


@dataclass
class AggParams:
    sum_weights: np.ndarray  # (d_last,)


@dataclass
class HeadParams:
    weights: list  # [(2*d_last, h1), (h1, h2), (h2, 1)]
    biases: list  # [(h1,), (h2,), (1,)]


@dataclass
class FeatureNorm:
    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,), strictly positive


@dataclass
class LabelNorm:
    mean: float
    std: float


@dataclass
class ModelState:
    gcn: GcnParams
    agg: AggParams
    head: HeadParams
    feature_norm: FeatureNorm
    label_norm: LabelNorm


@dataclass
class Gradients:
    gcn: list
    agg: np.ndarray
    head_weights: list
    head_biases: list


def init_model(
    rng,
    feature_dim: int = FEATURE_DIM,
    gcn_dims: tuple = (32, 32),
    head_hidden: tuple = (64, 64),
) -> ModelState:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in); aggregation weights start at 1."""
    def u(fan_in, shape):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    dims = (feature_dim,) + tuple(gcn_dims)
    gcn = [u(dims[i], (dims[i], dims[i + 1])) for i in range(len(dims) - 1)]
    d_last = dims[-1]
    hdims = (2 * d_last,) + tuple(head_hidden) + (1,)
    head_w, head_b = [], []
    for i in range(len(hdims) - 1):
        head_w.append(u(hdims[i], (hdims[i], hdims[i + 1])))
        head_b.append(u(hdims[i], (hdims[i + 1],)))
    return ModelState(
        gcn=GcnParams(layers=gcn),
        agg=AggParams(sum_weights=np.ones(d_last)),
        head=HeadParams(weights=head_w, biases=head_b),
        feature_norm=FeatureNorm(mean=np.zeros(feature_dim), std=np.ones(feature_dim)),
        label_norm=LabelNorm(mean=0.0, std=1.0),
    )


def normalize_label(m: ModelState, gflops: float) -> float:
    v = math.log2(max(gflops, LABEL_FLOOR_GFLOPS))
    return (v - m.label_norm.mean) / m.label_norm.std


def denormalize_label(m: ModelState, z: float) -> float:
    return 2.0 ** (z * m.label_norm.std + m.label_norm.mean)


def normalize_features(m: ModelState, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Z-score the real feature rows; null/featureless rows stay exactly zero."""
    out = np.zeros_like(x)
    out[mask] = (x[mask] - m.feature_norm.mean) / m.feature_norm.std
    return out


def tensors_for(graph: CodeGraph) -> GraphTensors:
    """Memoized graph_to_tensors; training loops revisit the same graphs."""
    cached = getattr(graph, "_tensors", None)
    if cached is None:
        cached = graph_to_tensors(graph)
        graph._tensors = cached
    return cached


# --- forward ------------------------------------------------------------------


def gcn_forward(t: GraphTensors, p: GcnParams) -> np.ndarray:
    h = t.feature_matrix
    for w in p.layers:
        if h.shape[1] != w.shape[0]:
            raise DomainError(f"GCN input width {h.shape[1]} != weight rows {w.shape[0]}")
        h = np.maximum(t.normalized_adjacency @ h @ w, 0.0)
    return h


def aggregate(h: np.ndarray, a: AggParams) -> np.ndarray:
    if h.shape[0] == 0:
        raise DomainError("cannot aggregate an empty embedding matrix")
    if h.shape[1] != a.sum_weights.shape[0]:
        raise DomainError("embedding width does not match aggregation weights")
    return np.concatenate([(h * a.sum_weights).sum(axis=0), h.max(axis=0)])


def head_forward(u: np.ndarray, head: HeadParams) -> float:
    a = u
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
    return float(a[0])


def embed(graph: CodeGraph, m: ModelState) -> np.ndarray:
    """Aggregated graph embedding (input to the head)."""
    t = tensors_for(graph)
    x = normalize_features(m, t.feature_matrix, t.feature_mask)
    h = x
    for w in m.gcn.layers:
        h = np.maximum(t.normalized_adjacency @ h @ w, 0.0)
    return aggregate(h, m.agg)


def forward(graph: CodeGraph, m: ModelState) -> float:
    """Predicted performance on the normalized log scale."""
    return head_forward(embed(graph, m), m.head)


def predict_gflops(graph: CodeGraph, m: ModelState) -> float:
    return denormalize_label(m, forward(graph, m))


def loss(preds, labels_normalized) -> float:
    p = np.atleast_1d(np.asarray(preds, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels_normalized, dtype=np.float64))
    if p.shape != y.shape:
        raise DomainError("prediction/label shape mismatch")
    if p.size == 0:
        raise DomainError("empty batch")
    return float(np.mean((p - y) ** 2))


# --- batched forward (shared adjacency) ----------------------------------------


def embed_batch(m: ModelState, feats: np.ndarray, mask: np.ndarray, adj: np.ndarray) -> np.ndarray:
    """Embeddings for (B, N, F) feature tensors sharing one adjacency/mask."""
    x = np.zeros_like(feats)
    x[:, mask, :] = (feats[:, mask, :] - m.feature_norm.mean) / m.feature_norm.std
    h = x
    for w in m.gcn.layers:
        h = np.maximum(np.einsum("nm,bmf,fd->bnd", adj, h, w, optimize=True), 0.0)
    s = (h * m.agg.sum_weights).sum(axis=1)
    mx = h.max(axis=1)
    return np.concatenate([s, mx], axis=1)


def head_forward_batch(u: np.ndarray, head: HeadParams) -> np.ndarray:
    a = u
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
    return a[:, 0]


# --- gradients ------------------------------------------------------------------


def _zero_grads(m: ModelState) -> Gradients:
    return Gradients(
        gcn=[np.zeros_like(w) for w in m.gcn.layers],
        agg=np.zeros_like(m.agg.sum_weights),
        head_weights=[np.zeros_like(w) for w in m.head.weights],
        head_biases=[np.zeros_like(b) for b in m.head.biases],
    )


def grad(m: ModelState, batch: list, scope: str = "all"):
    """(loss, Gradients) of mean squared error over [(graph, label_gflops)].

    scope "head_only" leaves gcn/agg gradients exactly zero (frozen-embedding
    contract for meta-training and fine-tuning).
    """
    if scope not in ("all", "head_only"):
        raise DomainError(f"unknown grad scope {scope!r}")
    if not batch:
        raise DomainError("empty batch")
    g = _zero_grads(m)
    total = 0.0
    inv_b = 1.0 / len(batch)
    for graph, label_gflops in batch:
        t = tensors_for(graph)
        x = normalize_features(m, t.feature_matrix, t.feature_mask)
        # forward with caches
        hs = [x]
        zs = []
        h = x
        for w in m.gcn.layers:
            z = t.normalized_adjacency @ h @ w
            h = np.maximum(z, 0.0)
            zs.append(z)
            hs.append(h)
        u = aggregate(h, m.agg)
        a = u
        acts = [u]
        zheads = []
        last = len(m.head.weights) - 1
        for i, (w, b) in enumerate(zip(m.head.weights, m.head.biases)):
            z = a @ w + b
            a = z if i == last else np.maximum(z, 0.0)
            zheads.append(z)
            acts.append(a)
        pred = float(a[0])
        y = normalize_label(m, label_gflops)
        if not math.isfinite(y):
            raise DomainError("non-finite label")
        total += (pred - y) ** 2
        dpred = 2.0 * (pred - y) * inv_b

        # head backward
        da = np.array([dpred])
        for i in range(last, -1, -1):
            dz = da if i == last else da * (zheads[i] > 0.0)
            g.head_weights[i] += np.outer(acts[i], dz)
            g.head_biases[i] += dz
            da = dz @ m.head.weights[i].T
        du = da
        if scope == "head_only":
            continue

        # aggregation backward
        d = m.agg.sum_weights.shape[0]
        ds, dmx = du[:d], du[d:]
        g.agg += hs[-1].sum(axis=0) * ds
        dh = np.tile(m.agg.sum_weights * ds, (hs[-1].shape[0], 1))
        arg = np.argmax(hs[-1], axis=0)
        dh[arg, np.arange(d)] += dmx

        # GCN backward
        for li in range(len(m.gcn.layers) - 1, -1, -1):
            dz = dh * (zs[li] > 0.0)
            ah = t.normalized_adjacency @ hs[li]
            g.gcn[li] += ah.T @ dz
            dh = t.normalized_adjacency @ (dz @ m.gcn.layers[li].T)
    return total * inv_b, g


def sgd_step(p, g, lr: float):
    """p - lr*g for ModelState/Gradients or HeadParams/(weights, biases) pairs."""
    if isinstance(p, ModelState) and isinstance(g, Gradients):
        _check_congruent(p, g)
        return replace(
            p,
            gcn=GcnParams([w - lr * d for w, d in zip(p.gcn.layers, g.gcn)]),
            agg=AggParams(p.agg.sum_weights - lr * g.agg),
            head=HeadParams(
                weights=[w - lr * d for w, d in zip(p.head.weights, g.head_weights)],
                biases=[b - lr * d for b, d in zip(p.head.biases, g.head_biases)],
            ),
        )
    if isinstance(p, HeadParams) and isinstance(g, Gradients):
        return HeadParams(
            weights=[w - lr * d for w, d in zip(p.weights, g.head_weights)],
            biases=[b - lr * d for b, d in zip(p.biases, g.head_biases)],
        )
    if isinstance(p, np.ndarray) and isinstance(g, np.ndarray):
        if p.shape != g.shape:
            raise DomainError("parameter/gradient shape mismatch")
        return p - lr * g
    raise DomainError(f"cannot apply sgd_step to {type(p).__name__}/{type(g).__name__}")


def _check_congruent(m: ModelState, g: Gradients) -> None:
    shapes_ok = (
        len(g.gcn) == len(m.gcn.layers)
        and all(a.shape == b.shape for a, b in zip(g.gcn, m.gcn.layers))
        and g.agg.shape == m.agg.sum_weights.shape
        and all(a.shape == b.shape for a, b in zip(g.head_weights, m.head.weights))
        and all(a.shape == b.shape for a, b in zip(g.head_biases, m.head.biases))
    )
    if not shapes_ok:
        raise DomainError("gradient shapes do not match parameters")


# --- flat head parameterization (MAML engine works on vectors) -------------------


def head_to_vec(head: HeadParams) -> np.ndarray:
    parts = []
    for w, b in zip(head.weights, head.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def vec_to_head(vec: np.ndarray, like: HeadParams) -> HeadParams:
    ws, bs, off = [], [], 0
    for w, b in zip(like.weights, like.biases):
        ws.append(vec[off : off + w.size].reshape(w.shape))
        off += w.size
        bs.append(vec[off : off + b.size].copy())
        off += b.size
    if off != vec.size:
        raise DomainError("flat head vector has the wrong length")
    return HeadParams(weights=ws, biases=bs)


def _head_unpack(vec: np.ndarray, like: HeadParams):
    ws, bs, off = [], [], 0
    for w, b in zip(like.weights, like.biases):
        ws.append(vec[off : off + w.size].reshape(w.shape))
        off += w.size
        bs.append(vec[off : off + b.size])
        off += b.size
    return ws, bs


def head_loss_grad(vec: np.ndarray, like: HeadParams, u: np.ndarray, y: np.ndarray):
    """(mse, d mse/d vec) of the head at flat params `vec` on embeddings u (B, D)."""
    ws, bs = _head_unpack(vec, like)
    last = len(ws) - 1
    acts = [u]
    zsigns = []
    a = u
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w + b
        if i == last:
            a = z
        else:
            zsigns.append(z > 0.0)
            a = np.maximum(z, 0.0)
        acts.append(a)
    preds = acts[-1][:, 0]
    resid = preds - y
    n = y.shape[0]
    mse = float(resid @ resid / n)
    da = (2.0 / n) * resid[:, None]
    gparts = []
    for i in range(last, -1, -1):
        dz = da if i == last else da * zsigns[i]
        gw = acts[i].T @ dz
        gb = dz.sum(axis=0)
        gparts.append((gw.ravel(), gb))
        da = dz @ ws[i].T
    flat = []
    for gw, gb in reversed(gparts):
        flat.append(gw)
        flat.append(gb)
    return mse, np.concatenate(flat)


def head_hvp(vec: np.ndarray, like: HeadParams, u: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product of the head MSE at `vec` with direction `v`.

    Forward-over-reverse: run a JVP alongside the forward pass, then
    differentiate the tangent of the backward pass.  ReLU second derivative
    is zero a.e., so activation masks are treated as constants.
    """
    ws, bs = _head_unpack(vec, like)
    vw, vb = _head_unpack(v, like)
    last = len(ws) - 1
    acts, tacts, zsigns = [u], [np.zeros_like(u)], []
    a, ta = u, np.zeros_like(u)
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = a @ w + b
        tz = ta @ w + a @ vw[i] + vb[i]
        if i == last:
            a, ta = z, tz
        else:
            sign = z > 0.0
            zsigns.append(sign)
            a, ta = np.maximum(z, 0.0), tz * sign
        acts.append(a)
        tacts.append(ta)
    n = y.shape[0]
    resid = acts[-1][:, 0] - y
    da = (2.0 / n) * resid[:, None]
    tda = (2.0 / n) * tacts[-1][:, 0][:, None]
    out_w = [None] * len(ws)
    out_b = [None] * len(ws)
    for i in range(last, -1, -1):
        dz = da if i == last else da * zsigns[i]
        tdz = tda if i == last else tda * zsigns[i]
        out_w[i] = tacts[i].T @ dz + acts[i].T @ tdz
        out_b[i] = tdz.sum(axis=0)
        da = dz @ ws[i].T
        tda = tdz @ ws[i].T + dz @ vw[i].T
    flat = []
    for gw, gb in zip(out_w, out_b):
        flat.append(gw.ravel())
        flat.append(gb)
    return np.concatenate(flat)


# --- checkpoints -----------------------------------------------------------------


CHECKPOINT_VERSION = 1


def save_model(m: ModelState, path) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "n_gcn": np.array(len(m.gcn.layers)),
        "agg_w": m.agg.sum_weights,
        "feat_mean": m.feature_norm.mean,
        "feat_std": m.feature_norm.std,
        "label_norm": np.array([m.label_norm.mean, m.label_norm.std]),
    }
    for i, w in enumerate(m.gcn.layers):
        arrays[f"gcn_{i}"] = w
    for i, (w, b) in enumerate(zip(m.head.weights, m.head.biases)):
        arrays[f"head_w{i}"] = w
        arrays[f"head_b{i}"] = b
    np.savez(path, **arrays)


def load_model(path) -> ModelState:
    with np.load(path) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise DomainError(f"unsupported checkpoint version {int(z['version'])}")
        n_gcn = int(z["n_gcn"])
        gcn = [z[f"gcn_{i}"].copy() for i in range(n_gcn)]
        head_w, head_b = [], []
        i = 0
        while f"head_w{i}" in z:
            head_w.append(z[f"head_w{i}"].copy())
            head_b.append(z[f"head_b{i}"].copy())
            i += 1
        label = z["label_norm"]
        return ModelState(
            gcn=GcnParams(gcn),
            agg=AggParams(z["agg_w"].copy()),
            head=HeadParams(weights=head_w, biases=head_b),
            feature_norm=FeatureNorm(z["feat_mean"].copy(), z["feat_std"].copy()),
            label_norm=LabelNorm(float(label[0]), float(label[1])),
        )
