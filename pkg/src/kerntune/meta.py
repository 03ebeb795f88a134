"""Meta-training of the cost model: pre-training, few-shot tasks, MAML.

The outer/inner loop math lives in `maml_outer_grad`, written over flat
parameter vectors and loss/gradient closures so the same engine runs both the
real model head and the closed-form toy problems the tests check it against.
After pre-training, gcn/agg are frozen; everything downstream adapts the head
only, which is why support/query sets are reduced to cached embeddings first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .model import (
    LABEL_FLOOR_GFLOPS,
    FeatureNorm,
    HeadParams,
    LabelNorm,
    ModelState,
    embed,
    grad,
    head_loss_grad,
    head_hvp,
    head_to_vec,
    init_model,
    sgd_step,
    tensors_for,
    vec_to_head,
)
from .util import write_csv


@dataclass
class LabeledSample:
    graph: object  # CodeGraph, raw or augmented per experiment arm
    kernel_class: str
    label_gflops: float

    def __post_init__(self):
        if not (math.isfinite(self.label_gflops) and self.label_gflops > 0):
            raise DomainError(f"label must be finite and positive, got {self.label_gflops}")


@dataclass
class MetaTask:
    support: list
    query: list
    classes: list


@dataclass
class MetaConfig:
    alpha: float = 0.01  # inner-loop lr
    beta: float = 0.001  # outer-loop lr
    gamma: float = 0.005  # pre-train lr
    pretrain_epochs: int = 30
    inner_steps: int = 1
    n_way: int = 3
    k_shot: int = 2
    meta_batch: int = 8
    outer_steps: int = 2000
    first_order: bool = True
    seed: int = 0

    def __post_init__(self):
        # zero is legal: alpha=0 degenerates to pooled SGD, beta=0 freezes
        # meta-training; both reductions are exercised by tests
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise DomainError("learning rates must be non-negative")
        if self.inner_steps < 1:
            raise DomainError("inner_steps must be >= 1")


# --- pre-training ---------------------------------------------------------------


def dataset_norms(dataset: list) -> tuple:
    """(FeatureNorm, LabelNorm) from the pre-training samples.

    Feature stats cover only real iterval rows; slots constant across the
    dataset keep std 1 so they normalize to a constant instead of exploding.
    """
    rows = []
    labels = []
    for s in dataset:
        t = tensors_for(s.graph)
        rows.append(t.feature_matrix[t.feature_mask])
        labels.append(math.log2(max(s.label_gflops, LABEL_FLOOR_GFLOPS)))
    stacked = np.concatenate(rows, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    lmean = float(np.mean(labels))
    lstd = float(np.std(labels))
    if lstd < 1e-12:
        lstd = 1.0
    return FeatureNorm(mean=mean, std=std), LabelNorm(mean=lmean, std=lstd)


def pretrain(
    dataset: list,
    cfg: MetaConfig,
    rng,
    gcn_dims: tuple = (32, 32),
    head_hidden: tuple = (64, 64),
) -> ModelState:
    """Random init + n epochs of per-sample SGD on the full model (lr gamma)."""
    if not dataset:
        raise DomainError("empty pre-training dataset")
    feature_norm, label_norm = dataset_norms(dataset)
    m = init_model(rng, gcn_dims=gcn_dims, head_hidden=head_hidden)
    m = replace(m, feature_norm=feature_norm, label_norm=label_norm)
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(dataset))
        for i in order:
            s = dataset[int(i)]
            _, g = grad(m, [(s.graph, s.label_gflops)], scope="all")
            m = sgd_step(m, g, cfg.gamma)
    return m


# --- few-shot task sampling -------------------------------------------------------


def group_by_class(dataset: list) -> dict:
    groups: dict = {}
    for s in dataset:
        groups.setdefault(s.kernel_class, []).append(s)
    return groups


def sample_meta_tasks(dataset: list, cfg: MetaConfig, rng) -> list:
    """meta_batch tasks of n_way classes, k_shot support + held-out query each.

    Query size per class is min(k_shot, class_size - k_shot), never zero.
    """
    groups = group_by_class(dataset)
    eligible = sorted(c for c, ss in groups.items() if len(ss) >= cfg.k_shot + 1)
    if len(eligible) < cfg.n_way:
        lacking = sorted(set(groups) - set(eligible))
        detail = f" (class {lacking[0]} has too few samples)" if lacking else ""
        raise DomainError(
            f"need {cfg.n_way} classes with >= {cfg.k_shot + 1} samples, "
            f"have {len(eligible)}{detail}"
        )
    tasks = []
    for _ in range(cfg.meta_batch):
        classes = [eligible[int(i)] for i in rng.choice(len(eligible), cfg.n_way, replace=False)]
        support, query = [], []
        for c in classes:
            pool = groups[c]
            perm = rng.permutation(len(pool))
            support.extend(pool[int(i)] for i in perm[: cfg.k_shot])
            q = min(cfg.k_shot, len(pool) - cfg.k_shot)
            query.extend(pool[int(i)] for i in perm[cfg.k_shot : cfg.k_shot + q])
        tasks.append(MetaTask(support=support, query=query, classes=classes))
    return tasks


# --- MAML engine -------------------------------------------------------------------


def maml_outer_grad(
    theta: np.ndarray,
    support_grad,
    query_grad,
    alpha: float,
    inner_steps: int,
    first_order: bool,
    support_hvp=None,
):
    """One task's contribution to the outer gradient.

    support_grad/query_grad: vec -> (loss, grad); support_hvp: (vec, v) -> H v,
    required for the second-order path.  Returns (support loss at theta,
    query loss at the adapted point, outer gradient, adapted theta).
    """
    thetas = [theta]
    support_loss0 = None
    for _ in range(inner_steps):
        ls, gs = support_grad(thetas[-1])
        if support_loss0 is None:
            support_loss0 = ls
        thetas.append(thetas[-1] - alpha * gs)
    lq, v = query_grad(thetas[-1])
    if not first_order:
        if support_hvp is None:
            raise DomainError("second-order MAML needs a support HVP")
        # d theta_K / d theta_0 applied transposed: v <- (I - alpha H_k) v
        for k in range(inner_steps - 1, -1, -1):
            v = v - alpha * support_hvp(thetas[k], v)
    return support_loss0, lq, v, thetas[-1]


def _embedded(m: ModelState, samples: list) -> tuple:
    u = np.stack([embed(s.graph, m) for s in samples])
    y = np.array(
        [
            (math.log2(max(s.label_gflops, LABEL_FLOOR_GFLOPS)) - m.label_norm.mean)
            / m.label_norm.std
            for s in samples
        ]
    )
    return u, y


def inner_adapt(m: ModelState, support: list, alpha: float, inner_steps: int = 1) -> HeadParams:
    """Adapted head after inner_steps of head-only SGD on the support loss."""
    if not support:
        raise DomainError("empty support set")
    u, y = _embedded(m, support)
    theta = head_to_vec(m.head)
    for _ in range(inner_steps):
        _, g = head_loss_grad(theta, m.head, u, y)
        theta = theta - alpha * g
    return vec_to_head(theta, m.head)


def meta_step(m: ModelState, tasks: list, cfg: MetaConfig) -> tuple:
    """One outer update over a task batch; returns (model, stats dict).

    Outer rule: theta <- theta - beta * sum_i grad of task i's query loss
    (sum, not mean).  gcn/agg are untouched.
    """
    if not tasks:
        raise DomainError("empty task batch")
    theta = head_to_vec(m.head)
    outer = np.zeros_like(theta)
    sup_losses, qry_losses = [], []
    for task in tasks:
        us, ys = _embedded(m, task.support)
        uq, yq = _embedded(m, task.query)
        sgrad = lambda t: head_loss_grad(t, m.head, us, ys)
        qgrad = lambda t: head_loss_grad(t, m.head, uq, yq)
        shvp = lambda t, v: head_hvp(t, m.head, us, ys, v)
        ls, lq, g, _ = maml_outer_grad(
            theta,
            sgrad,
            qgrad,
            cfg.alpha,
            cfg.inner_steps,
            cfg.first_order,
            support_hvp=shvp,
        )
        outer += g
        sup_losses.append(ls)
        qry_losses.append(lq)
    head = vec_to_head(theta - cfg.beta * outer, m.head)
    stats = {
        "support_loss": float(np.mean(sup_losses)),
        "query_loss": float(np.mean(qry_losses)),
    }
    return replace(m, head=head), stats


def meta_train(m: ModelState, dataset: list, cfg: MetaConfig, rng, log_path=None) -> ModelState:
    rows = []
    for step in range(cfg.outer_steps):
        tasks = sample_meta_tasks(dataset, cfg, rng)
        m, stats = meta_step(m, tasks, cfg)
        rows.append((step, stats["support_loss"], stats["query_loss"]))
    if log_path is not None:
        write_csv(log_path, ("step", "support_loss", "query_loss"), rows)
    return m


# --- online fine-tuning --------------------------------------------------------------


def fine_tune_embedded(m: ModelState, u: np.ndarray, y: np.ndarray, alpha: float, steps: int) -> ModelState:
    """Head-only full-batch SGD on precomputed embeddings u with normalized labels y."""
    if u.shape[0] == 0 or steps == 0:
        return m
    theta = head_to_vec(m.head)
    for _ in range(steps):
        _, g = head_loss_grad(theta, m.head, u, y)
        theta = theta - alpha * g
    return replace(m, head=vec_to_head(theta, m.head))


def fine_tune(m: ModelState, measurements: list, alpha: float, steps: int) -> ModelState:
    """Adapt the head to the tuning run's accumulated measurements:
    (graph, measured gflops) pairs or LabeledSamples."""
    if not measurements:
        return m
    first = measurements[0]
    if isinstance(first, tuple):
        measurements = [
            LabeledSample(graph=g, kernel_class="", label_gflops=max(v, LABEL_FLOOR_GFLOPS))
            for g, v in measurements
        ]
    u, y = _embedded(m, measurements)
    return fine_tune_embedded(m, u, y, alpha, steps)
