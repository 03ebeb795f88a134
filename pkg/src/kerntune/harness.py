"""Dataset generation, metrics, and experiment orchestration.

The offline side samples kernel classes from the generator ranges, measures a
few hundred configs per class against a training platform profile, and stores
everything index-based so graphs can be rebuilt in either representation.
The online side runs (arm, kernel, seed) tuning cells, computes per-run error
metrics, and aggregates plot/report data.  Cells are content-addressed so an
interrupted comparison resumes instead of recomputing.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .baselines import flat_features
from .errors import ConfigError, DomainError
from .graphs import build_super_template, config_graph
from .kernels import (
    OP_TYPES,
    KernelSpec,
    KnobSpace,
    build_knob_space,
    config_index,
    index_config,
    kernels_from_yaml,
    kernels_to_yaml,
    sample_configs,
)
from .meta import LabeledSample
from .model import LABEL_FLOOR_GFLOPS
from .oracle import PlatformProfile, get_profile, kernel_work_flops, measure
from .search import ARMS, TuneConfig, TuningRecord, tune
from .util import fmt, rng_from, stable_digest, write_csv

ONE_D_OPS = ("conv1d", "transpose1d")


@dataclass(frozen=True)
class DatasetParams:
    n_kernels: int = 47
    configs_per_kernel: int = 200
    profile: str = "platform-A"
    stride: int = 3
    padding: int = 1
    kernel_sizes: tuple = (1, 3, 5, 7)
    input_range_1d: tuple = (150, 600)
    in_ch_range_1d: tuple = (32, 128)
    out_ch_range_1d: tuple = (32, 512)
    input_range_2d: tuple = (7, 224)
    in_ch_range_2d: tuple = (3, 128)
    out_ch_range_2d: tuple = (16, 128)

    def __post_init__(self):
        if self.n_kernels < 1 or self.configs_per_kernel < 1:
            raise DomainError("dataset sizes must be positive")
        for name in (
            "input_range_1d",
            "in_ch_range_1d",
            "out_ch_range_1d",
            "input_range_2d",
            "in_ch_range_2d",
            "out_ch_range_2d",
        ):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise DomainError(f"bad range {name}: ({lo}, {hi})")
        if not self.kernel_sizes:
            raise DomainError("kernel_sizes must be non-empty")

    def to_dict(self) -> dict:
        return {
            "n_kernels": self.n_kernels,
            "configs_per_kernel": self.configs_per_kernel,
            "profile": self.profile,
            "stride": self.stride,
            "padding": self.padding,
            "kernel_sizes": list(self.kernel_sizes),
            "input_range_1d": list(self.input_range_1d),
            "in_ch_range_1d": list(self.in_ch_range_1d),
            "out_ch_range_1d": list(self.out_ch_range_1d),
            "input_range_2d": list(self.input_range_2d),
            "in_ch_range_2d": list(self.in_ch_range_2d),
            "out_ch_range_2d": list(self.out_ch_range_2d),
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetParams":
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return DatasetParams(**kw)


@dataclass
class KernelRecords:
    spec: KernelSpec
    indices: np.ndarray  # config indices into build_knob_space(spec)
    gflops: np.ndarray
    feasible: np.ndarray


@dataclass
class Dataset:
    params: DatasetParams
    entries: list  # of KernelRecords

    @property
    def n_samples(self) -> int:
        return sum(len(e.indices) for e in self.entries)

    def content_hash(self) -> str:
        parts = [json.dumps(self.params.to_dict(), sort_keys=True)]
        for e in self.entries:
            parts.append(e.spec.signature())
            parts.append(e.indices.tobytes())
            parts.append(e.gflops.tobytes())
            parts.append(e.feasible.tobytes())
        return stable_digest("dataset", tuple(parts))


def sample_kernel(params: DatasetParams, rng) -> KernelSpec:
    op = OP_TYPES[int(rng.integers(0, len(OP_TYPES)))]
    one_d = op in ONE_D_OPS
    i_rng = params.input_range_1d if one_d else params.input_range_2d
    ci_rng = params.in_ch_range_1d if one_d else params.in_ch_range_2d
    co_rng = params.out_ch_range_1d if one_d else params.out_ch_range_2d
    return KernelSpec(
        op_type=op,
        input_size=int(rng.integers(i_rng[0], i_rng[1] + 1)),
        in_channels=int(rng.integers(ci_rng[0], ci_rng[1] + 1)),
        out_channels=int(rng.integers(co_rng[0], co_rng[1] + 1)),
        kernel_size=int(params.kernel_sizes[int(rng.integers(0, len(params.kernel_sizes)))]),
        stride=params.stride,
        padding=params.padding,
    )


def sample_distinct_kernels(params: DatasetParams, n: int, rng, exclude=()) -> list:
    taken = set(exclude)
    out = []
    guard = 0
    while len(out) < n:
        spec = sample_kernel(params, rng)
        sig = spec.signature()
        if sig not in taken:
            taken.add(sig)
            out.append(spec)
        guard += 1
        if guard > 100 * n + 1000:
            raise DomainError("could not sample enough distinct kernel signatures")
    return out


def gen_dataset(params: DatasetParams, rng) -> Dataset:
    """Sample kernel classes, measure configs per class on the training
    profile, return an index-based dataset (graphs are rebuilt on demand)."""
    profile = get_profile(params.profile)
    kernels = sample_distinct_kernels(params, params.n_kernels, rng)
    entries = []
    for spec in kernels:
        space = build_knob_space(spec)
        configs = sample_configs(space, params.configs_per_kernel, rng)
        idx = np.array([config_index(space, c) for c in configs], dtype=np.int64)
        gfl = np.empty(len(configs), dtype=np.float64)
        feas = np.empty(len(configs), dtype=bool)
        for j, c in enumerate(configs):
            m = measure(spec, c, profile, space)
            gfl[j] = m.gflops
            feas[j] = m.feasible
        entries.append(KernelRecords(spec=spec, indices=idx, gflops=gfl, feasible=feas))
    return Dataset(params=params, entries=entries)


def dataset_samples(ds: Dataset, augmented: bool) -> list:
    """Materialize LabeledSamples, raw graphs or super-graph-augmented ones.
    Infeasible measurements get the floor label."""
    template = build_super_template(OP_TYPES) if augmented else None
    out = []
    for e in ds.entries:
        space = build_knob_space(e.spec)
        cls = e.spec.signature()
        for i, idx in enumerate(e.indices):
            cfg = index_config(space, int(idx))
            g = config_graph(e.spec, cfg, space, template)
            label = max(float(e.gflops[i]), LABEL_FLOOR_GFLOPS)
            out.append(LabeledSample(graph=g, kernel_class=cls, label_gflops=label))
    return out


def save_dataset(ds: Dataset, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    kpath = os.path.join(out_dir, "kernels.yaml")
    with open(kpath, "w", encoding="utf-8") as f:
        f.write(kernels_to_yaml([e.spec for e in ds.entries]))
    rows = []
    for ki, e in enumerate(ds.entries):
        for idx, g, fe in zip(e.indices, e.gflops, e.feasible):
            rows.append((ki, int(idx), fmt(float(g)), int(fe)))
    spath = os.path.join(out_dir, "samples.csv")
    write_csv(spath, ("kernel", "config_index", "gflops", "feasible"), rows)
    manifest = {
        "kind": "dataset",
        "params": ds.params.to_dict(),
        "n_samples": ds.n_samples,
        "content_hash": ds.content_hash(),
        "artifacts": {"kernels": "kernels.yaml", "samples": "samples.csv"},
    }
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_dataset(in_dir: str) -> Dataset:
    mpath = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise ConfigError(f"no dataset manifest at {mpath}")
    with open(mpath, encoding="utf-8") as f:
        manifest = json.load(f)
    params = DatasetParams.from_dict(manifest["params"])
    with open(os.path.join(in_dir, "kernels.yaml"), encoding="utf-8") as f:
        kernels = kernels_from_yaml(f.read())
    per_kernel: dict = {i: ([], [], []) for i in range(len(kernels))}
    with open(os.path.join(in_dir, "samples.csv"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        ki, idx, g, fe = line.split(",")
        bucket = per_kernel[int(ki)]
        bucket[0].append(int(idx))
        bucket[1].append(float(g))
        bucket[2].append(bool(int(fe)))
    entries = []
    for i, spec in enumerate(kernels):
        idxs, gfl, feas = per_kernel[i]
        entries.append(
            KernelRecords(
                spec=spec,
                indices=np.array(idxs, dtype=np.int64),
                gflops=np.array(gfl, dtype=np.float64),
                feasible=np.array(feas, dtype=bool),
            )
        )
    ds = Dataset(params=params, entries=entries)
    if ds.content_hash() != manifest["content_hash"]:
        raise ConfigError(f"dataset at {in_dir} does not match its manifest hash")
    return ds


# --- toy space used by search sanity checks and goldens ------------------------------

# 4*2*4*2*2*2 = 256 configs; six live knobs keep single-knob SA moves useful
TOY_CAPS = {
    "tile_x": 4,
    "tile_y": 2,
    "tile_f": 4,
    "tile_rc": 2,
    "tile_rx": 2,
    "tile_ry": 2,
    "auto_unroll_max_step": 1,
    "unroll_explicit": 1,
}


def toy_kernel() -> KernelSpec:
    return KernelSpec(
        op_type="conv2d",
        input_size=64,
        in_channels=32,
        out_channels=64,
        kernel_size=3,
        stride=1,
        padding=1,
    )


def toy_space(spec: KernelSpec | None = None) -> KnobSpace:
    return build_knob_space(spec or toy_kernel(), caps=TOY_CAPS)


def enumerate_space(spec: KernelSpec, space: KnobSpace, profile: PlatformProfile) -> list:
    """(index, gflops, feasible) for every config; small spaces only."""
    out = []
    for i in range(space.size):
        m = measure(spec, index_config(space, i), profile, space)
        out.append((i, m.gflops, m.feasible))
    return out


# --- metrics ------------------------------------------------------------------------


def _log2_floor(v: float) -> float:
    return math.log2(max(v, LABEL_FLOOR_GFLOPS))


def _mean(xs: list) -> float:
    return sum(xs) / len(xs)


def top_quartile_rows(rows: list) -> list:
    """Rows whose measured GFLOPS fall in the top 25% of the run (at least
    one row; ties broken toward earlier iterations)."""
    n = len(rows)
    k = max(1, (n + 3) // 4)
    order = sorted(range(n), key=lambda i: (-rows[i][2], rows[i][0]))
    keep = sorted(order[:k])
    return [rows[i] for i in keep]


def compute_metrics(record: TuningRecord, xgb_final_best: float | None = None) -> dict:
    """Per-run error and outcome metrics.

    MSE is over (predicted, measured) pairs on the log2 scale, z-normalized
    by the run's measured statistics; rows without a prediction (random arm,
    pre-model rounds) are skipped.  MSE_D applies the same error to the rows
    whose measurements are in the run's top quartile.  All arithmetic is
    plain Python so reported numbers are exactly reproducible by hand.
    """
    rows = record.rows
    if not rows:
        raise DomainError("empty tuning record")
    logs = [_log2_floor(r[2]) for r in rows]
    mu = _mean(logs)
    var = _mean([(v - mu) ** 2 for v in logs])
    sd = math.sqrt(var)
    if sd <= 1e-12:
        sd = 1.0

    def norm(v: float) -> float:
        return (_log2_floor(v) - mu) / sd

    def sq_errors(subset) -> list:
        out = []
        for r in subset:
            if math.isnan(r[3]):
                continue
            out.append((norm(r[3]) - norm(r[2])) ** 2)
        return out

    errs = sq_errors(rows)
    errs_d = sq_errors(top_quartile_rows(rows))
    final_best = rows[-1][4]
    metrics = {
        "final_best_gflops": final_best,
        "mse": _mean(errs) if errs else None,
        "mse_d": _mean(errs_d) if errs_d else None,
        "normalized_to_xgb": None,
        "iters_to_xgb_best": None,
    }
    if xgb_final_best is not None and xgb_final_best > 0:
        metrics["normalized_to_xgb"] = final_best / xgb_final_best
        for r in rows:
            if r[4] >= xgb_final_best:
                metrics["iters_to_xgb_best"] = r[0]
                break
    return metrics


# --- experiment orchestration ---------------------------------------------------------


@dataclass
class ExperimentPlan:
    arms: tuple
    kernels: list
    profile: str = "platform-A"
    budget: int = 1000
    batch: int = 16
    seeds: tuple = tuple(range(10))
    xfer_profile: str | None = None  # source platform for xgb-Xfer priors

    def __post_init__(self):
        if not self.arms:
            raise DomainError("plan needs at least one arm")
        for a in self.arms:
            if a not in ARMS:
                raise ConfigError(f"unknown arm {a!r}; valid arms: {ARMS}")
        if len(set(self.seeds)) != len(self.seeds):
            raise DomainError("plan seeds must be distinct")
        if not self.kernels:
            raise DomainError("plan needs at least one kernel")
        if "xgb-Xfer" in self.arms and self.xfer_profile is None:
            raise ConfigError("arm 'xgb-Xfer' in plan requires xfer_profile")


def validate_heldout(plan: ExperimentPlan, dataset: Dataset) -> None:
    """Kernels under tuning must not share a class signature with the
    meta-training data."""
    train_sigs = {e.spec.signature() for e in dataset.entries}
    for spec in plan.kernels:
        if spec.signature() in train_sigs:
            raise ConfigError(
                f"kernel {spec.signature()} appears in the training dataset; "
                "tuning kernels must be held out"
            )


def default_plan(params: DatasetParams | None = None, exclude_sigs=()) -> ExperimentPlan:
    params = params or DatasetParams()
    rng = rng_from("heldout-kernels", 0)
    kernels = sample_distinct_kernels(params, 4, rng, exclude=exclude_sigs)
    return ExperimentPlan(
        arms=("xgb", "meta-BO", "meta-BO-T"),
        kernels=kernels,
        profile=params.profile,
        budget=1000,
        batch=16,
        seeds=tuple(range(10)),
    )


def _safe_sig(spec: KernelSpec) -> str:
    return spec.signature().replace("/", "-")


def cell_hash(plan: ExperimentPlan, arm: str, spec: KernelSpec, seed: int, cfg: TuneConfig) -> str:
    return stable_digest(
        "cell",
        arm,
        spec.key_parts(),
        seed,
        plan.profile,
        plan.budget,
        plan.batch,
        # xfer cells depend on where their priors were measured
        plan.xfer_profile if arm == "xgb-Xfer" else "",
        repr(cfg),
    )


def cell_rng(arm: str, spec: KernelSpec, seed: int, profile_name: str):
    return rng_from("tune-cell", arm, spec.key_parts(), seed, profile_name)


def xfer_prior_samples(dataset: Dataset, source: PlatformProfile, per_kernel: int = 8) -> list:
    """Flat-feature training pairs from the corpus kernels measured on the
    source platform: the transfer arm's previously-tuned-workload logs.

    Priors come from other kernels only; the kernel under tuning is excluded
    from the corpus by the held-out check, so the transfer arm starts with the
    same offline experience the meta arms carry, never with free measurements
    of its own target."""
    out = []
    for e in dataset.entries:
        space = build_knob_space(e.spec)
        configs = [index_config(space, int(i)) for i in e.indices[:per_kernel]]
        feats = flat_features(e.spec, space, configs)
        for c, f in zip(configs, feats):
            m = measure(e.spec, c, source, space)
            out.append((f, _log2_floor(m.gflops)))
    return out


def run_cell(
    plan: ExperimentPlan,
    arm: str,
    spec: KernelSpec,
    seed: int,
    cfg: TuneConfig,
    *,
    models: dict | None = None,
    template=None,
    prior_samples: list | None = None,
    dataset: Dataset | None = None,
) -> TuningRecord:
    profile = get_profile(plan.profile)
    rng = cell_rng(arm, spec, seed, plan.profile)
    model = None
    if arm.startswith("meta-"):
        models = models or {}
        key = "super" if arm.endswith("-T") else "raw"
        model = models.get(key)
        if model is None:
            raise ConfigError(f"arm {arm!r} needs a {key!r}-representation checkpoint")
    prior = prior_samples
    if arm == "xgb-Xfer" and prior is None:
        if dataset is None:
            raise ConfigError(
                "arm 'xgb-Xfer' needs the training dataset (or prebuilt prior_samples) "
                "for its transfer priors"
            )
        prior = xfer_prior_samples(dataset, get_profile(plan.xfer_profile))
    return tune(
        spec,
        arm,
        profile,
        plan.budget,
        plan.batch,
        cfg,
        rng,
        seed=seed,
        model=model,
        prior_samples=prior,
        template=template,
    )


def run_experiment(
    plan: ExperimentPlan,
    out_dir: str,
    *,
    models: dict | None = None,
    cfg: TuneConfig | None = None,
    dataset: Dataset | None = None,
) -> dict:
    """Execute all plan cells, skipping any whose record file already exists
    under the same content hash; then write metrics, plot data, and the
    bundle aggregate."""
    cfg = cfg or TuneConfig()
    if dataset is not None:
        validate_heldout(plan, dataset)
    prior = None
    if "xgb-Xfer" in plan.arms:
        if dataset is None:
            raise ConfigError("plan has arm 'xgb-Xfer' but no training dataset was given")
        prior = xfer_prior_samples(dataset, get_profile(plan.xfer_profile))
    needs_template = any(a.endswith("-T") for a in plan.arms)
    template = build_super_template(OP_TYPES) if needs_template else None

    rec_dir = os.path.join(out_dir, "records")
    os.makedirs(rec_dir, exist_ok=True)
    mpath = os.path.join(out_dir, "manifest.json")
    manifest = {"kind": "experiment", "cells": {}, "artifacts": {}}
    if os.path.exists(mpath):
        with open(mpath, encoding="utf-8") as f:
            manifest = json.load(f)
        manifest.setdefault("cells", {})
        manifest.setdefault("artifacts", {})

    records: dict = {}
    for spec in plan.kernels:
        for arm in plan.arms:
            for seed in plan.seeds:
                h = cell_hash(plan, arm, spec, seed, cfg)
                rel = os.path.join("records", f"{arm}__{_safe_sig(spec)}__s{seed}.csv")
                path = os.path.join(out_dir, rel)
                if manifest["cells"].get(rel) == h and os.path.exists(path):
                    with open(path, encoding="utf-8") as f:
                        rec = TuningRecord.from_csv(f.read(), spec=spec, arm=arm, seed=seed)
                else:
                    rec = run_cell(plan, arm, spec, seed, cfg, models=models,
                                   template=template, prior_samples=prior)
                    with open(path, "w", encoding="utf-8") as f:
                        f.write(rec.to_csv())
                    manifest["cells"][rel] = h
                records[(arm, spec.signature(), seed)] = rec

    report = write_report(plan, records, out_dir)
    manifest["artifacts"].update(report)
    manifest["profile"] = plan.profile
    manifest["arms"] = list(plan.arms)
    manifest["seeds"] = list(plan.seeds)
    with open(mpath, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return {"records": records, "manifest": manifest}


def _median(xs: list) -> float:
    s = sorted(xs)
    n = len(s)
    mid = n // 2
    return s[mid] if n % 2 else 0.5 * (s[mid - 1] + s[mid])


def write_report(plan: ExperimentPlan, records: dict, out_dir: str) -> dict:
    """metrics.csv (one row per cell), summary.csv (per-arm aggregates),
    plotdata.csv (best-vs-iteration mean and range over seeds), bundle.csv
    (summed workload time over the kernel bundle)."""
    sigs = [s.signature() for s in plan.kernels]
    metric_rows = []
    for arm in plan.arms:
        for spec, sig in zip(plan.kernels, sigs):
            for seed in plan.seeds:
                rec = records[(arm, sig, seed)]
                xgb_best = None
                if "xgb" in plan.arms:
                    xgb_best = records[("xgb", sig, seed)].final_best
                m = compute_metrics(rec, xgb_final_best=xgb_best)
                metric_rows.append(
                    (
                        arm,
                        sig,
                        seed,
                        fmt(m["final_best_gflops"]),
                        "" if m["normalized_to_xgb"] is None else fmt(m["normalized_to_xgb"]),
                        "" if m["mse"] is None else fmt(m["mse"]),
                        "" if m["mse_d"] is None else fmt(m["mse_d"]),
                        "" if m["iters_to_xgb_best"] is None else m["iters_to_xgb_best"],
                    )
                )
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_csv(
        metrics_path,
        (
            "arm",
            "kernel",
            "seed",
            "final_best_gflops",
            "normalized_to_xgb",
            "mse",
            "mse_d",
            "iters_to_xgb_best",
        ),
        metric_rows,
    )

    summary_rows = []
    for arm in plan.arms:
        bests = [records[(arm, sig, seed)].final_best for sig in sigs for seed in plan.seeds]
        row = (arm, fmt(_mean(bests)), fmt(_median(bests)))
        summary_rows.append(row)
    summary_path = os.path.join(out_dir, "summary.csv")
    write_csv(summary_path, ("arm", "mean_final_best", "median_final_best"), summary_rows)

    plot_rows = []
    for arm in plan.arms:
        for sig in sigs:
            recs = [records[(arm, sig, seed)] for seed in plan.seeds]
            n_iter = min(len(r.rows) for r in recs)
            for i in range(n_iter):
                vals = [r.rows[i][4] for r in recs]
                plot_rows.append(
                    (arm, sig, i + 1, fmt(_mean(vals)), fmt(min(vals)), fmt(max(vals)))
                )
    plot_path = os.path.join(out_dir, "plotdata.csv")
    write_csv(
        plot_path,
        ("arm", "kernel", "iteration", "mean_best", "min_best", "max_best"),
        plot_rows,
    )

    bundle_rows = []
    for arm in plan.arms:
        for seed in plan.seeds:
            t = 0.0
            for spec, sig in zip(plan.kernels, sigs):
                best = records[(arm, sig, seed)].final_best
                best = max(best, LABEL_FLOOR_GFLOPS)
                t += kernel_work_flops(spec) / (best * 1e9)
            bundle_rows.append((arm, seed, fmt(t)))
    bundle_path = os.path.join(out_dir, "bundle.csv")
    write_csv(bundle_path, ("arm", "seed", "workload_seconds"), bundle_rows)

    return {
        "metrics": "metrics.csv",
        "summary": "summary.csv",
        "plotdata": "plotdata.csv",
        "bundle": "bundle.csv",
    }
