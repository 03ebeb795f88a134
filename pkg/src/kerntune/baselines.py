"""Non-meta baselines: least-squares gradient-boosted trees and random search.

The booster is plain first-order boosting on squared error: base prediction is
the (weighted) label mean, each tree greedily fits residuals with exact
best-variance-reduction splits.  Split search is vectorized across features by
bincounting residual sums over per-feature value codes, which keeps per-round
refits cheap enough to run inside the tuning loop on one core.

Ties break deterministically toward the lowest feature index, then the lowest
threshold; fits with identical inputs are bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .kernels import OP_TYPES, KernelSpec, KnobSpace

KNOB_FAMILY_ORDER = (
    "tile_x",
    "tile_y",
    "tile_f",
    "tile_rc",
    "tile_rx",
    "tile_ry",
    "auto_unroll_max_step",
    "unroll_explicit",
)

MIN_SPLIT_GAIN = 1e-12


@dataclass
class GbtHyperParams:
    n_trees: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1


@dataclass
class RegressionTree:
    feature: np.ndarray  # (nodes,) int, -1 for leaves
    threshold: np.ndarray  # (nodes,) float, x <= t goes left
    left: np.ndarray  # (nodes,) int child ids
    right: np.ndarray
    value: np.ndarray  # (nodes,) float leaf predictions


@dataclass
class GbtModel:
    base_prediction: float
    learning_rate: float
    max_depth: int
    n_trees: int
    trees: list = field(default_factory=list)


def flat_features(spec: KernelSpec, space: KnobSpace, configs: list) -> np.ndarray:
    """Kernel-invariant flat encoding: normalized knob value-indices in family
    order (absent knobs 0), spec signature features, op one-hot."""
    b = len(configs)
    cols = {k.name: j for j, k in enumerate(space.knobs)}
    choice_mat = np.array([c.choices for c in configs], dtype=np.float64).reshape(b, -1)
    out = np.zeros((b, len(KNOB_FAMILY_ORDER) + 6 + len(OP_TYPES)))
    for fi, name in enumerate(KNOB_FAMILY_ORDER):
        j = cols.get(name)
        if j is not None:
            out[:, fi] = choice_mat[:, j] / len(space.knobs[j].values)
    base = len(KNOB_FAMILY_ORDER)
    out[:, base + 0] = math.log2(spec.input_size)
    out[:, base + 1] = math.log2(spec.in_channels)
    out[:, base + 2] = math.log2(spec.out_channels)
    out[:, base + 3] = float(spec.kernel_size)
    out[:, base + 4] = float(spec.stride)
    out[:, base + 5] = float(spec.padding)
    out[:, base + 6 + OP_TYPES.index(spec.op_type)] = 1.0
    return out


def _as_arrays(samples: list) -> tuple:
    x = np.array([np.asarray(s[0], dtype=np.float64) for s in samples])
    y = np.array([float(s[1]) for s in samples])
    return x, y


def _fit_tree(
    codes: np.ndarray,
    uniques: list,
    offsets: np.ndarray,
    n_bins: int,
    res: np.ndarray,
    w: np.ndarray,
    max_depth: int,
) -> RegressionTree:
    n, d = codes.shape
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(0)
        right.append(0)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    frontier = [(root, np.arange(n), 0)]
    while frontier:
        node, idx, depth = frontier.pop()
        wn = w[idx]
        rn = res[idx]
        n_tot = wn.sum()
        s_tot = (wn * rn).sum()
        if depth >= max_depth or idx.size < 2:
            value[node] = s_tot / n_tot
            continue
        flat = (codes[idx] + offsets).ravel()
        counts = np.bincount(flat, weights=np.repeat(wn, d), minlength=n_bins)
        sums = np.bincount(flat, weights=np.repeat(wn * rn, d), minlength=n_bins)
        members = np.bincount(flat, minlength=n_bins)
        gains = np.full(n_bins, -np.inf)
        for f in range(d):
            lo, hi = offsets[f], offsets[f] + len(uniques[f])
            if hi - lo < 2:
                continue
            cn = np.cumsum(counts[lo:hi])[:-1]
            cs = np.cumsum(sums[lo:hi])[:-1]
            rn_right = n_tot - cn
            # emptiness by exact membership count: float cumsums of fractional
            # weights can leave ~1e-16 residue and admit an empty child
            cm = np.cumsum(members[lo:hi])[:-1]
            valid = (cm > 0) & (cm < idx.size)
            score = np.where(
                valid,
                cs**2 / np.where(cn > 0, cn, 1.0)
                + (s_tot - cs) ** 2 / np.where(rn_right > 0, rn_right, 1.0),
                -np.inf,
            )
            gains[lo : hi - 1] = score - s_tot**2 / n_tot
        best = int(np.argmax(gains))
        if not (gains[best] > MIN_SPLIT_GAIN):
            value[node] = s_tot / n_tot
            continue
        f = int(np.searchsorted(offsets, best, side="right") - 1)
        bin_in_f = best - offsets[f]
        feature[node] = f
        threshold[node] = float(uniques[f][bin_in_f])
        go_left = codes[idx, f] <= bin_in_f
        li, ri = new_node(), new_node()
        left[node], right[node] = li, ri
        frontier.append((ri, idx[~go_left], depth + 1))
        frontier.append((li, idx[go_left], depth + 1))
    return RegressionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value),
    )


def _tree_predict(tree: RegressionTree, x: np.ndarray) -> np.ndarray:
    cur = np.zeros(x.shape[0], dtype=np.int64)
    while True:
        f = tree.feature[cur]
        active = f >= 0
        if not active.any():
            break
        fa = np.where(active, f, 0)
        goto = np.where(
            x[np.arange(x.shape[0]), fa] <= tree.threshold[cur],
            tree.left[cur],
            tree.right[cur],
        )
        cur = np.where(active, goto, cur)
    return tree.value[cur]


def gbt_fit(samples: list, hp: GbtHyperParams, weights=None) -> GbtModel:
    """Boosted least-squares fit of [(feature vector, label)] pairs."""
    if not samples:
        raise DomainError("empty training set")
    x, y = _as_arrays(samples)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape:
        raise DomainError("weights length mismatch")
    if (w <= 0).any():
        raise DomainError("weights must be positive")

    # per-feature value codes, shared by every tree of this fit
    uniques, code_cols = [], []
    for f in range(x.shape[1]):
        uq, inv = np.unique(x[:, f], return_inverse=True)
        uniques.append(uq)
        code_cols.append(inv)
    codes = np.stack(code_cols, axis=1).astype(np.int64)
    offsets = np.zeros(x.shape[1], dtype=np.int64)
    for f in range(1, x.shape[1]):
        offsets[f] = offsets[f - 1] + len(uniques[f - 1])
    n_bins = int(offsets[-1] + len(uniques[-1]))

    base = float((w * y).sum() / w.sum())
    model = GbtModel(
        base_prediction=base,
        learning_rate=hp.learning_rate,
        max_depth=hp.max_depth,
        n_trees=hp.n_trees,
    )
    preds = np.full(len(y), base)
    for _ in range(hp.n_trees):
        res = y - preds
        tree = _fit_tree(codes, uniques, offsets, n_bins, res, w, hp.max_depth)
        model.trees.append(tree)
        preds += hp.learning_rate * _tree_predict(tree, x)
    return model


def gbt_predict(m: GbtModel, x) -> float:
    return float(gbt_predict_many(m, np.asarray(x, dtype=np.float64)[None, :])[0])


@dataclass
class _PackedForest:
    # all trees padded to one (n_trees, max_nodes) block so a whole forest
    # traverses level-by-level in a few fancy-indexing ops
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    feature_dim: int


def _pack_forest(m: GbtModel) -> _PackedForest:
    t = len(m.trees)
    maxn = max(tr.feature.shape[0] for tr in m.trees)
    feature = np.full((t, maxn), -1, dtype=np.int64)
    threshold = np.zeros((t, maxn))
    left = np.zeros((t, maxn), dtype=np.int64)
    right = np.zeros((t, maxn), dtype=np.int64)
    value = np.zeros((t, maxn))
    fdim = 0
    for i, tr in enumerate(m.trees):
        k = tr.feature.shape[0]
        feature[i, :k] = tr.feature
        threshold[i, :k] = tr.threshold
        left[i, :k] = tr.left
        right[i, :k] = tr.right
        value[i, :k] = tr.value
        interior = tr.feature >= 0
        if interior.any():
            fdim = max(fdim, int(tr.feature[interior].max()) + 1)
    return _PackedForest(feature, threshold, left, right, value, fdim)


def gbt_predict_many(m: GbtModel, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise DomainError("expected a (batch, features) matrix")
    if not m.trees:
        return np.full(x.shape[0], m.base_prediction)
    packed = getattr(m, "_packed", None)
    if packed is None:
        packed = _pack_forest(m)
        m._packed = packed
    if packed.feature_dim > x.shape[1]:
        raise DomainError("feature dimension smaller than the model expects")
    rows = np.arange(packed.feature.shape[0])[:, None]
    cols = np.arange(x.shape[0])[None, :]
    cur = np.zeros((packed.feature.shape[0], x.shape[0]), dtype=np.int64)
    for _ in range(m.max_depth + 1):
        f = packed.feature[rows, cur]
        interior = f >= 0
        if not interior.any():
            break
        fx = x[cols, np.where(interior, f, 0)]
        goto = np.where(
            fx <= packed.threshold[rows, cur],
            packed.left[rows, cur],
            packed.right[rows, cur],
        )
        cur = np.where(interior, goto, cur)
    return m.base_prediction + m.learning_rate * packed.value[rows, cur].sum(axis=0)


def gbt_warm_start(prior_samples: list, new_samples: list, hp: GbtHyperParams, weight: float = 0.2) -> GbtModel:
    """Pooled fit with prior samples down-weighted by `weight`."""
    if not prior_samples and not new_samples:
        raise DomainError("no samples to fit")
    samples = list(prior_samples) + list(new_samples)
    w = np.concatenate(
        [np.full(len(prior_samples), float(weight)), np.ones(len(new_samples))]
    )
    return gbt_fit(samples, hp, weights=w)


def random_search_arm(spec, profile, budget: int, rng, batch: int = 16, space=None, seed: int = 0):
    """Uniform without-replacement control arm, recorded like every other arm."""
    from .search import TuneConfig, tune

    return tune(
        spec,
        "random",
        profile,
        budget,
        batch,
        TuneConfig(),
        rng,
        seed=seed,
        space=space,
    )


# --- serialization ---------------------------------------------------------------


def gbt_to_json(m: GbtModel) -> str:
    doc = {
        "version": 1,
        "base_prediction": m.base_prediction,
        "learning_rate": m.learning_rate,
        "max_depth": m.max_depth,
        "n_trees": m.n_trees,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
            }
            for t in m.trees
        ],
    }
    return json.dumps(doc)


def gbt_from_json(text: str) -> GbtModel:
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise DomainError("unsupported booster checkpoint version")
    m = GbtModel(
        base_prediction=float(doc["base_prediction"]),
        learning_rate=float(doc["learning_rate"]),
        max_depth=int(doc["max_depth"]),
        n_trees=int(doc["n_trees"]),
    )
    for t in doc["trees"]:
        m.trees.append(
            RegressionTree(
                feature=np.array(t["feature"], dtype=np.int64),
                threshold=np.array(t["threshold"], dtype=np.float64),
                left=np.array(t["left"], dtype=np.int64),
                right=np.array(t["right"], dtype=np.int64),
                value=np.array(t["value"], dtype=np.float64),
            )
        )
    return m
