#!/usr/bin/env python3
"""End-to-end experiment driver: dataset -> pretrain -> meta-train -> compare.

Trains both graph representations (raw and super-graph-augmented), runs the
default held-out comparison plan on platform-A, and optionally the
cross-platform run (tune on platform-B with the platform-A model against the
transfer baseline).  Everything lands under --out with manifests, so reruns
skip completed tuning cells.

Full defaults take roughly half an hour on one core; --quick cuts the plan to
a smoke-test scale for a first look.
"""

import argparse
import dataclasses
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from kerntune.harness import (
    DatasetParams,
    cell_hash,  # noqa: F401  (handy in interactive use)
    dataset_samples,
    default_plan,
    gen_dataset,
    load_dataset,
    run_experiment,
    save_dataset,
    validate_heldout,
)
from kerntune.meta import MetaConfig, meta_train, pretrain
from kerntune.model import load_model, save_model
from kerntune.search import TuneConfig
from kerntune.util import rng_from


def ensure_dataset(out: str, seed: int, quick: bool):
    ddir = os.path.join(out, "dataset")
    if os.path.exists(os.path.join(ddir, "manifest.json")):
        print(f"dataset: reusing {ddir}")
        return load_dataset(ddir)
    params = DatasetParams(n_kernels=12, configs_per_kernel=60) if quick else DatasetParams()
    t0 = time.time()
    ds = gen_dataset(params, rng_from("gen-dataset", seed))
    save_dataset(ds, ddir)
    print(f"dataset: {len(ds.entries)} kernels, {ds.n_samples} samples ({time.time() - t0:.1f}s)")
    return ds


def ensure_model(out: str, ds, rep: str, seed: int, quick: bool):
    path = os.path.join(out, "model", f"meta_{rep}.npz")
    if os.path.exists(path):
        print(f"model ({rep}): reusing {path}")
        return load_model(path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    cfg = MetaConfig(seed=seed)
    if quick:
        cfg = dataclasses.replace(cfg, pretrain_epochs=5, outer_steps=200)
    samples = dataset_samples(ds, augmented=rep == "super")
    t0 = time.time()
    m = pretrain(samples, cfg, rng_from("pretrain", rep, seed))
    save_model(m, os.path.join(out, "model", f"pretrained_{rep}.npz"))
    print(f"pretrain ({rep}): {time.time() - t0:.1f}s")
    t0 = time.time()
    log = os.path.join(out, "model", f"metatrain_{rep}_log.csv")
    m = meta_train(m, samples, cfg, rng_from("metatrain", rep, seed), log_path=log)
    save_model(m, path)
    print(f"meta-train ({rep}): {time.time() - t0:.1f}s -> {path}")
    return m


def summarize(out_dir: str) -> None:
    path = os.path.join(out_dir, "summary.csv")
    if not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as f:
        for line in f.read().splitlines():
            print("  " + line.replace(",", "\t"))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/pipeline")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--quick", action="store_true", help="small dataset, short training, tiny plan")
    parser.add_argument("--cross-platform", action="store_true", help="also tune on platform-B")
    args = parser.parse_args()

    out = args.out
    os.makedirs(out, exist_ok=True)
    ds = ensure_dataset(out, args.seed, args.quick)
    models = {rep: ensure_model(out, ds, rep, args.seed, args.quick) for rep in ("raw", "super")}

    train_sigs = tuple(e.spec.signature() for e in ds.entries)
    plan = default_plan(ds.params, exclude_sigs=train_sigs)
    if args.quick:
        plan = dataclasses.replace(plan, kernels=plan.kernels[:2], budget=160, seeds=(0, 1))
    validate_heldout(plan, ds)

    t0 = time.time()
    run_experiment(plan, os.path.join(out, "compare"), models=models, cfg=TuneConfig(), dataset=ds)
    print(f"comparison ({len(plan.kernels)} kernels x {len(plan.arms)} arms x "
          f"{len(plan.seeds)} seeds): {time.time() - t0:.1f}s")
    summarize(os.path.join(out, "compare"))

    if args.cross_platform:
        xplan = dataclasses.replace(
            plan,
            arms=("xgb-Xfer", "meta-BO-T"),
            profile="platform-B",
            xfer_profile="platform-A",
        )
        t0 = time.time()
        run_experiment(xplan, os.path.join(out, "cross"), models=models, cfg=TuneConfig(), dataset=ds)
        print(f"cross-platform run: {time.time() - t0:.1f}s")
        summarize(os.path.join(out, "cross"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
