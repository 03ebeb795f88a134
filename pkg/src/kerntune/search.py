"""Candidate selection and the tuning loop.

Two proposers: simulated annealing over config indices with the cost model as
energy, and an exploitation-centric batch Bayesian optimizer (UCB with
hallucinated variance downdates in the style of batched GP-UCB).  `tune`
interleaves proposal, oracle measurement, recording, and per-round model
updates for every framework arm.

Proposers take the predictor as a plain callable (configs -> scores) so the
same code drives the neural cost model and the boosted-tree baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .baselines import GbtHyperParams, flat_features, gbt_fit, gbt_predict_many, gbt_warm_start
from .errors import ConfigError, DomainError, NumericError
from .graphs import batch_layout, build_super_template, encode_batch
from .kernels import (
    OP_TYPES,
    KernelSpec,
    KnobConfig,
    KnobSpace,
    build_knob_space,
    config_index,
    index_config,
)
from .meta import fine_tune_embedded
from .model import (
    LABEL_FLOOR_GFLOPS,
    ModelState,
    embed_batch,
    head_forward_batch,
)
from .util import fmt

ARMS = ("xgb", "xgb-Xfer", "random", "meta-BO", "meta-BO-T", "meta-SA", "meta-SA-T")

LENGTHSCALE_GRID = (0.1, 0.3, 1.0, 3.0)
MAX_JITTER_NOISE = 1e-1


@dataclass
class SaSchedule:
    initial_temp: float = 1.0
    cooling: float = 0.95
    steps_per_round: int = 128
    parallel_chains: int = 16

    def __post_init__(self):
        if not 0.0 < self.cooling < 1.0:
            raise DomainError("cooling must be in (0, 1)")
        if self.initial_temp <= 0:
            raise DomainError("initial_temp must be positive")


@dataclass
class GpSurrogate:
    x: np.ndarray  # (n, d) normalized knob coordinates
    y: np.ndarray  # (n,) normalized performance
    lengthscales: np.ndarray | None = None  # (d,)
    noise_variance: float = 1e-4
    chol: np.ndarray | None = None
    alpha: np.ndarray | None = None
    fitted_noise: float | None = None

    @property
    def n_obs(self) -> int:
        return int(self.x.shape[0]) if self.x.ndim == 2 else 0


def knob_coordinates(space: KnobSpace, configs: list) -> np.ndarray:
    """Each knob's value index mapped to [0,1) by index/cardinality."""
    cards = np.array([len(k.values) for k in space.knobs], dtype=np.float64)
    mat = np.array([c.choices for c in configs], dtype=np.float64).reshape(len(configs), -1)
    return mat / cards


def gp_kernel(x1: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    a = x1 / lengthscales
    b = x2 / lengthscales
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-0.5 * np.maximum(d2, 0.0))


def _chol_with_escalation(k: np.ndarray, noise: float) -> tuple:
    nv = noise
    while True:
        try:
            l = cholesky(k + nv * np.eye(k.shape[0]), lower=True, check_finite=False)
            return l, nv
        except np.linalg.LinAlgError:
            pass
        if nv >= MAX_JITTER_NOISE:
            raise NumericError(
                f"kernel matrix not positive definite even at noise {nv:g}"
            )
        nv *= 10.0


def gp_fit(s: GpSurrogate, select_lengthscale: bool = True) -> GpSurrogate:
    """Refresh the factorization; optionally pick the isotropic lengthscale by
    marginal likelihood over a fixed grid."""
    if s.n_obs == 0:
        return s
    d = s.x.shape[1]
    if select_lengthscale or s.lengthscales is None:
        candidates = [np.full(d, ls) for ls in LENGTHSCALE_GRID]
    else:
        candidates = [np.asarray(s.lengthscales, dtype=np.float64)]
    best = None
    n = s.n_obs
    for ls in candidates:
        k = gp_kernel(s.x, s.x, ls)
        l, nv = _chol_with_escalation(k, s.noise_variance)
        alpha = cho_solve((l, True), s.y, check_finite=False)
        mll = (
            -0.5 * float(s.y @ alpha)
            - float(np.log(np.diag(l)).sum())
            - 0.5 * n * math.log(2.0 * math.pi)
        )
        if best is None or mll > best[0]:
            best = (mll, ls, l, alpha, nv)
    _, ls, l, alpha, nv = best
    return replace(s, lengthscales=ls, chol=l, alpha=alpha, fitted_noise=nv)


def _require_fitted(s: GpSurrogate) -> None:
    if s.chol is None or s.alpha is None:
        raise DomainError("surrogate not fitted; call gp_fit first")


def gp_predict_many(s: GpSurrogate, x: np.ndarray) -> tuple:
    """Exact posterior (means, variances) of the latent function."""
    if s.n_obs == 0:
        return np.zeros(x.shape[0]), np.ones(x.shape[0])
    _require_fitted(s)
    kxn = gp_kernel(s.x, x, s.lengthscales)
    mean = kxn.T @ s.alpha
    v = solve_triangular(s.chol, kxn, lower=True, check_finite=False)
    var = np.maximum(1.0 - (v * v).sum(axis=0), 0.0)
    return mean, var


def gp_predict(s: GpSurrogate, x) -> tuple:
    mean, var = gp_predict_many(s, np.asarray(x, dtype=np.float64)[None, :])
    return float(mean[0]), float(var[0])


def _gp_posterior_cov(s: GpSurrogate, x: np.ndarray) -> np.ndarray:
    kpp = gp_kernel(x, x, s.lengthscales)
    kxn = gp_kernel(s.x, x, s.lengthscales)
    v = solve_triangular(s.chol, kxn, lower=True, check_finite=False)
    return kpp - v.T @ v


# --- proposers ---------------------------------------------------------------------


def _space_multipliers(space: KnobSpace) -> np.ndarray:
    cards = [len(k.values) for k in space.knobs]
    mult = np.ones(len(cards), dtype=np.int64)
    for j in range(len(cards) - 2, -1, -1):
        mult[j] = mult[j + 1] * cards[j + 1]
    return mult


def draw_unvisited(space: KnobSpace, visited: set, count: int, rng) -> list:
    """Distinct config indices outside `visited`, uniform; fewer if exhausted."""
    size = space.size
    remaining = size - len(visited)
    count = min(count, max(remaining, 0))
    if count <= 0:
        return []
    if size <= 65536:
        unvisited = np.array([i for i in range(size) if i not in visited], dtype=np.int64)
        pick = rng.choice(len(unvisited), size=count, replace=False)
        return [int(unvisited[i]) for i in pick]
    out: list = []
    chosen: set = set()
    guard = 0
    while len(out) < count:
        need = count - len(out)
        for v in rng.integers(0, size, size=need + 8):
            i = int(v)
            if i not in visited and i not in chosen:
                chosen.add(i)
                out.append(i)
                if len(out) == count:
                    break
        guard += 1
        if guard > 10000:
            raise NumericError("unvisited sampling failed to converge")
    return out


def sa_explore(
    predict,
    space: KnobSpace,
    sched: SaSchedule,
    visited: set,
    rng,
) -> dict:
    """Parallel annealing chains maximizing `predict` (configs -> scores);
    returns {config_index: score} over everything any chain evaluated."""
    starts = draw_unvisited(space, visited, sched.parallel_chains, rng)
    if not starts:
        return {}
    mult = _space_multipliers(space)
    cards = np.array([len(k.values) for k in space.knobs], dtype=np.int64)
    n_knobs = len(cards)
    cur = np.array([index_config(space, i).choices for i in starts], dtype=np.int64)
    n_chains = cur.shape[0]

    def configs_of(mat):
        return [KnobConfig(tuple(int(v) for v in row)) for row in mat]

    def indices_of(mat):
        return (mat * mult).sum(axis=1)

    energy = np.asarray(predict(configs_of(cur)), dtype=np.float64)
    history: dict = {}
    for idx, e in zip(indices_of(cur), energy):
        history[int(idx)] = float(e)

    temp = sched.initial_temp
    for _ in range(sched.steps_per_round):
        knob = rng.integers(0, n_knobs, size=n_chains)
        nudge = rng.random(n_chains) < 0.5
        delta = rng.integers(0, 2, size=n_chains) * 2 - 1
        resample = rng.integers(0, cards[knob])
        u = rng.random(n_chains)

        nxt = cur.copy()
        rows = np.arange(n_chains)
        stepped = np.clip(cur[rows, knob] + delta, 0, cards[knob] - 1)
        nxt[rows, knob] = np.where(nudge, stepped, resample)

        e_new = np.asarray(predict(configs_of(nxt)), dtype=np.float64)
        for idx, e in zip(indices_of(nxt), e_new):
            history[int(idx)] = float(e)
        # uphill always accepted; exponent clamped to avoid overflow warnings
        downhill_p = np.exp(np.minimum((e_new - energy) / temp, 0.0))
        accept = (e_new >= energy) | (u < downhill_p)
        cur = np.where(accept[:, None], nxt, cur)
        energy = np.where(accept, e_new, energy)
        temp = max(temp * sched.cooling, 1e-9)

    return history


def rank_history(history: dict, visited: set, count: int) -> list:
    """Best `count` unvisited config indices from an exploration history,
    highest score first, ties broken toward the lower index."""
    ranked = sorted(
        ((i, e) for i, e in history.items() if i not in visited),
        key=lambda t: (-t[1], t[0]),
    )
    return [i for i, _ in ranked[:count]]


def sa_propose(
    predict,
    space: KnobSpace,
    sched: SaSchedule,
    visited: set,
    rng,
    batch: int,
) -> list:
    """Annealing proposal: explore, then take the top unvisited configs seen."""
    history = sa_explore(predict, space, sched, visited, rng)
    picks = rank_history(history, visited, batch)
    if len(picks) < batch:
        extra_exclude = visited | set(picks)
        picks += draw_unvisited(space, extra_exclude, batch - len(picks), rng)
    return [index_config(space, i) for i in picks]


def bo_propose_batch(
    s: GpSurrogate,
    space: KnobSpace,
    batch: int,
    beta_ucb: float,
    candidate_pool: int,
    visited: set,
    rng,
    pool: list | None = None,
) -> list:
    """Sequential UCB over a candidate pool with hallucinated batch downdates.

    After each pick the posterior mean is hallucinated as that point's
    observation, which leaves all means unchanged and only shrinks variances,
    so the batch spreads out instead of piling on one optimum.
    """
    if batch < 1:
        raise DomainError("batch must be >= 1")
    if pool is None:
        indices = draw_unvisited(space, visited, candidate_pool, rng)
    else:
        seen: set = set()
        indices = []
        for c in pool:
            i = config_index(space, c)
            if i in visited or i in seen:
                continue
            seen.add(i)
            indices.append(i)
    if not indices:
        raise DomainError("empty candidate pool")
    indices = sorted(indices)
    take = min(batch, len(indices))
    if s.n_obs == 0:
        pick = rng.permutation(len(indices))[:take]
        return [index_config(space, indices[int(i)]) for i in pick]
    _require_fitted(s)
    configs = [index_config(space, i) for i in indices]
    coords = knob_coordinates(space, configs)
    mean, _ = gp_predict_many(s, coords)
    cov = _gp_posterior_cov(s, coords)
    var = np.maximum(np.diag(cov).copy(), 0.0)
    noise = s.fitted_noise if s.fitted_noise is not None else s.noise_variance
    active = np.ones(len(indices), dtype=bool)
    chosen = []
    for _ in range(take):
        ucb = mean + math.sqrt(beta_ucb) * np.sqrt(np.maximum(var, 0.0))
        ucb[~active] = -np.inf
        z = int(np.argmax(ucb))
        chosen.append(indices[z])
        active[z] = False
        denom = var[z] + noise
        if denom > 0.0:
            c = cov[:, z].copy()
            var = np.maximum(var - c * c / denom, 0.0)
            cov = cov - np.outer(c, c) / denom
    return [index_config(space, i) for i in chosen]


def bo_search(measure_fn, space: KnobSpace, budget: int, rng, *,
              batch: int = 4, beta_ucb: float = 1.0, noise_variance: float = 1e-4) -> dict:
    """Standalone batch BO against a measured objective (config -> GFLOPS).

    Proposes UCB batches over the whole unvisited space, measures, refits the
    GP on z-scored log2 values each round.  Zero measurements (infeasible) are
    kept in the result but excluded from the fit.  Returns {config_index: value}.
    """
    budget = min(budget, space.size)
    visited: set = set()
    results: dict = {}
    coords: list = []
    raws: list = []
    s = GpSurrogate(x=np.empty((0, len(space.knobs))), y=np.empty(0),
                    noise_variance=noise_variance)
    while len(results) < budget:
        take = min(batch, budget - len(results))
        configs = bo_propose_batch(s, space, take, beta_ucb, space.size, visited, rng)
        for c in configs:
            i = config_index(space, c)
            visited.add(i)
            g = float(measure_fn(c))
            results[i] = g
            if g > 0.0:
                coords.append(knob_coordinates(space, [c])[0])
                raws.append(math.log2(g))
        if len(configs) < take:  # space exhausted
            break
        if raws:
            y = np.asarray(raws)
            sd = float(y.std())
            y = (y - y.mean()) / (sd if sd > 1e-12 else 1.0)
            s = gp_fit(GpSurrogate(x=np.asarray(coords), y=y,
                                   noise_variance=noise_variance))
    return results


def sa_search(measure_fn, space: KnobSpace, budget: int, rng, *,
              initial_temp: float = 0.25, cooling: float = 0.95,
              stall_limit: int = 16) -> dict:
    """Single-chain annealing against a measured objective, maximizing log2
    GFLOPS, with per-config memoization: the budget counts distinct configs
    measured, and re-proposing a known one is free.  After `stall_limit` steps
    without a new measurement the chain restarts from a fresh random config at
    full temperature.  Returns {config_index: value}.
    """
    budget = min(budget, space.size)
    if budget <= 0:
        return {}
    cards = space.cardinalities
    results: dict = {}

    def energy(i: int) -> float:
        if i not in results:
            results[i] = float(measure_fn(index_config(space, i)))
        return math.log2(max(results[i], LABEL_FLOOR_GFLOPS))

    cur = draw_unvisited(space, set(), 1, rng)[0]
    cur_e = energy(cur)
    temp = initial_temp
    stall = 0
    while len(results) < budget:
        before = len(results)
        k = int(rng.integers(len(cards)))
        choices = list(index_config(space, cur).choices)
        if rng.random() < 0.5:
            delta = 1 if rng.random() < 0.5 else -1
            choices[k] = min(max(choices[k] + delta, 0), cards[k] - 1)
        else:
            choices[k] = int(rng.integers(cards[k]))
        nxt = config_index(space, KnobConfig(tuple(choices)))
        u = float(rng.random())
        e_new = energy(nxt)
        if e_new >= cur_e or u < math.exp(min((e_new - cur_e) / temp, 0.0)):
            cur, cur_e = nxt, e_new
        temp = max(temp * cooling, 1e-9)
        stall = 0 if len(results) > before else stall + 1
        if stall >= stall_limit and len(results) < budget:
            cur = draw_unvisited(space, set(results), 1, rng)[0]
            cur_e = energy(cur)
            temp = initial_temp
            stall = 0
    return results


# --- the tuning loop ------------------------------------------------------------------


@dataclass
class TuneConfig:
    sa: SaSchedule = field(default_factory=SaSchedule)
    beta_ucb: float = 2.0
    candidate_pool: int = 512
    gp_noise: float = 1e-4
    gp_obs_window: int = 512
    gp_refit_hyper_every: int = 8
    fine_tune_alpha: float = 0.01
    fine_tune_steps: int = 8
    gbt: GbtHyperParams = field(default_factory=GbtHyperParams)
    xfer_weight: float = 0.2


@dataclass
class TuningRecord:
    spec: KernelSpec
    arm: str
    seed: int
    rows: list = field(default_factory=list)
    # row = (iteration, config_index, measured_gflops, predicted_gflops, best_gflops)

    @property
    def final_best(self) -> float:
        return self.rows[-1][4] if self.rows else 0.0

    def to_csv(self) -> str:
        header = "iteration,config_index,measured_gflops,predicted_gflops,best_gflops"
        lines = [header]
        for row in self.rows:
            lines.append(",".join(fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str, spec: KernelSpec | None = None, arm: str = "", seed: int = 0):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        rows = []
        for ln in lines[1:]:
            it, ci, mg, pg, bg = ln.split(",")
            rows.append((int(it), int(ci), float(mg), float(pg), float(bg)))
        return TuningRecord(spec=spec, arm=arm, seed=seed, rows=rows)


def tune(
    spec: KernelSpec,
    arm: str,
    profile,
    budget: int,
    batch: int,
    cfg: TuneConfig,
    rng,
    *,
    seed: int = 0,
    model: ModelState | None = None,
    prior_samples: list | None = None,
    space: KnobSpace | None = None,
    template=None,
) -> TuningRecord:
    """Run one (arm, kernel, seed) tuning cell against the oracle.

    Meta arms need `model` (a pre/meta-trained checkpoint); xgb-Xfer takes
    `prior_samples` as [(flat feature vector, log2-gflops label)].  Infeasible
    measurements are recorded at 0 GFLOPS, excluded from the GP, and fed to
    the cost model at the floor label.
    """
    from .oracle import batch_measure  # local import keeps module deps acyclic

    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}; valid arms: {ARMS}")
    if batch < 1 or budget < batch:
        raise DomainError("need budget >= batch >= 1")
    if space is None:
        space = build_knob_space(spec)
    is_meta = arm.startswith("meta-")
    if is_meta and model is None:
        raise ConfigError(f"arm {arm!r} requires a model checkpoint")
    if arm == "xgb-Xfer" and not prior_samples:
        raise ConfigError("arm 'xgb-Xfer' requires prior_samples from a source platform")
    if arm.endswith("-T") and template is None:
        template = build_super_template(OP_TYPES)
    layout = batch_layout(spec, template if arm.endswith("-T") else None)

    m = model
    gbt = None
    if arm == "xgb-Xfer" and prior_samples:
        gbt = gbt_warm_start(prior_samples, [], cfg.gbt, cfg.xfer_weight)
    surrogate = GpSurrogate(
        x=np.zeros((0, len(space.knobs))), y=np.zeros(0), noise_variance=cfg.gp_noise
    )
    lengthscales = None
    visited: set = set()
    rows = []
    best = 0.0
    iteration = 0

    # accumulated training pools
    emb_rows: list = []
    y_norm: list = []
    flat_rows: list = []
    y_log2: list = []
    gp_coords: list = []
    gp_raw: list = []

    def meta_scores(configs: list) -> tuple:
        feats = encode_batch(spec, space, configs, layout)
        u = embed_batch(m, feats, layout.feature_mask, layout.adjacency)
        z = head_forward_batch(u, m.head)
        return z, u

    def meta_energy(configs: list) -> np.ndarray:
        return meta_scores(configs)[0]

    def xgb_energy(configs: list) -> np.ndarray:
        feats = flat_features(spec, space, configs)
        if gbt is None:
            return np.zeros(len(configs))
        return gbt_predict_many(gbt, feats)

    round_no = 0
    while iteration < budget:
        b = min(batch, budget - iteration)
        if arm == "random":
            picks = draw_unvisited(space, visited, b, rng)
            configs = [index_config(space, i) for i in picks]
        elif arm in ("xgb", "xgb-Xfer"):
            if gbt is None and prior_samples is None:
                picks = draw_unvisited(space, visited, b, rng)
                configs = [index_config(space, i) for i in picks]
            else:
                configs = sa_propose(xgb_energy, space, cfg.sa, visited, rng, b)
        elif arm in ("meta-SA", "meta-SA-T"):
            configs = sa_propose(meta_energy, space, cfg.sa, visited, rng, b)
        else:  # meta-BO / meta-BO-T
            # the model steers exploration (annealing on predicted scores) and
            # its best finds become the pool the GP's UCB selects the batch from
            history = sa_explore(meta_energy, space, cfg.sa, visited, rng)
            pool_idx = rank_history(history, visited, cfg.candidate_pool)
            if len(pool_idx) < cfg.candidate_pool:
                exclude = visited | set(pool_idx)
                pool_idx += draw_unvisited(
                    space, exclude, cfg.candidate_pool - len(pool_idx), rng
                )
            pool_cfgs = [index_config(space, i) for i in pool_idx]
            configs = bo_propose_batch(
                surrogate, space, b, cfg.beta_ucb, cfg.candidate_pool, visited, rng, pool=pool_cfgs
            )
        if not configs:
            break

        # predictions recorded with the pre-measurement model state
        u_new = None
        if is_meta:
            z_new, u_new = meta_scores(configs)
            preds = [2.0 ** (z * m.label_norm.std + m.label_norm.mean) for z in z_new]
        elif arm in ("xgb", "xgb-Xfer") and gbt is not None:
            preds = [2.0**v for v in xgb_energy(configs)]
        else:
            preds = [float("nan")] * len(configs)

        flat_new = flat_features(spec, space, configs) if arm in ("xgb", "xgb-Xfer") else None
        measurements = batch_measure(spec, configs, profile, space)
        for j, (c, meas) in enumerate(zip(configs, measurements)):
            iteration += 1
            ci = config_index(space, c)
            visited.add(ci)
            best = max(best, meas.gflops)
            rows.append((iteration, ci, meas.gflops, float(preds[j]), best))
            label = max(meas.gflops, LABEL_FLOOR_GFLOPS)
            if is_meta:
                y_norm.append(
                    (math.log2(label) - m.label_norm.mean) / m.label_norm.std
                )
            elif arm in ("xgb", "xgb-Xfer"):
                flat_rows.append(flat_new[j])
                y_log2.append(math.log2(label))
            if arm in ("meta-BO", "meta-BO-T") and meas.feasible:
                gp_coords.append(knob_coordinates(space, [c])[0])
                gp_raw.append(math.log2(label))

        # per-round model updates
        if is_meta:
            emb_rows.extend(u_new)
            m = fine_tune_embedded(
                m,
                np.asarray(emb_rows),
                np.asarray(y_norm),
                cfg.fine_tune_alpha,
                cfg.fine_tune_steps,
            )
        elif arm == "xgb":
            gbt = gbt_fit(list(zip(flat_rows, y_log2)), cfg.gbt)
        elif arm == "xgb-Xfer":
            gbt = gbt_warm_start(
                prior_samples or [], list(zip(flat_rows, y_log2)), cfg.gbt, cfg.xfer_weight
            )
        if arm in ("meta-BO", "meta-BO-T") and gp_raw:
            w = cfg.gp_obs_window
            ys = np.asarray(gp_raw[-w:])
            std = float(ys.std())
            std = std if std > 1e-9 else 1.0
            surrogate = GpSurrogate(
                x=np.asarray(gp_coords[-w:]),
                y=(ys - float(ys.mean())) / std,
                lengthscales=lengthscales,
                noise_variance=cfg.gp_noise,
            )
            select = lengthscales is None or round_no % cfg.gp_refit_hyper_every == 0
            surrogate = gp_fit(surrogate, select_lengthscale=select)
            lengthscales = surrogate.lengthscales
        round_no += 1

    return TuningRecord(spec=spec, arm=arm, seed=seed, rows=rows)


def save_record(record: TuningRecord, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(record.to_csv())
