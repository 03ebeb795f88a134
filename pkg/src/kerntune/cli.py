"""Command-line entry point.

Subcommands cover the full pipeline: gen-dataset, pretrain, metatrain, tune,
compare, report.  Settings come from a YAML config file (sections: dataset,
model, meta, tune, plan, checkpoints) with a handful of common flags layered
on top.  Every command writes its outputs plus a manifest.json recording the
arm, seed, config hash, and artifact paths.

Exit codes: 0 success, 2 configuration problems, 3 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import yaml

from .errors import ConfigError, DomainError, NumericError
from .harness import (
    DatasetParams,
    ExperimentPlan,
    cell_rng,
    compute_metrics,
    dataset_samples,
    gen_dataset,
    load_dataset,
    run_experiment,
    save_dataset,
    write_report,
    xfer_prior_samples,
)
from .kernels import KernelSpec, kernel_from_dict, kernels_from_yaml
from .meta import MetaConfig, meta_train, pretrain
from .model import load_model, save_model
from .oracle import get_profile
from .search import ARMS, TuneConfig, TuningRecord, tune
from .util import rng_from, stable_digest


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"bad config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a mapping at top level")
    return doc


def _config_hash(doc: dict, args) -> str:
    blob = json.dumps(
        {"config": doc, "seed": args.seed, "arm": args.arm, "profile": args.profile},
        sort_keys=True,
        default=str,
    )
    return stable_digest("cli-config", blob)


def _write_manifest(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    existing = {}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            existing = json.load(f)
    existing.update(payload)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(existing, f, indent=2, sort_keys=True)


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _meta_config(doc: dict, seed: int) -> MetaConfig:
    sec = _section(doc, "meta")
    sec["seed"] = seed
    allowed = set(MetaConfig.__dataclass_fields__)
    bad = set(sec) - allowed
    if bad:
        raise ConfigError(f"unknown meta options: {sorted(bad)}")
    return MetaConfig(**sec)


def _tune_config(doc: dict) -> TuneConfig:
    sec = _section(doc, "tune")
    # tuning-loop knobs only; run-shape keys live beside them in the section
    for k in ("kernel", "budget", "batch", "checkpoint", "representation"):
        sec.pop(k, None)
    allowed = set(TuneConfig.__dataclass_fields__) - {"sa", "gbt"}
    bad = set(sec) - allowed
    if bad:
        raise ConfigError(f"unknown tune options: {sorted(bad)}")
    return TuneConfig(**sec)


def _dataset_params(doc: dict, profile: str | None) -> DatasetParams:
    sec = _section(doc, "dataset")
    sec.pop("dir", None)
    if profile:
        sec["profile"] = profile
    try:
        return DatasetParams.from_dict(sec)
    except TypeError as e:
        raise ConfigError(f"bad dataset options: {e}") from e


def _dataset_dir(doc: dict, fallback: str | None = None) -> str:
    d = _section(doc, "dataset").get("dir") or fallback
    if not d:
        raise ConfigError("dataset.dir missing from config")
    return d


def _model_dims(doc: dict) -> tuple:
    sec = _section(doc, "model")
    gcn = tuple(sec.get("gcn_dims", (32, 32)))
    head = tuple(sec.get("head_hidden", (64, 64)))
    return gcn, head


def _representation(doc: dict, default: str = "super") -> str:
    rep = _section(doc, "model").get("representation", default)
    if rep not in ("raw", "super"):
        raise ConfigError(f"model.representation must be 'raw' or 'super', got {rep!r}")
    return rep


def cmd_gen_dataset(args, doc: dict) -> int:
    params = _dataset_params(doc, args.profile)
    rng = rng_from("gen-dataset", args.seed)
    ds = gen_dataset(params, rng)
    out = args.out or _dataset_dir(doc)
    save_dataset(ds, out)
    _write_manifest(
        out,
        {"command": "gen-dataset", "seed": args.seed, "config_hash": _config_hash(doc, args)},
    )
    print(f"dataset: {len(ds.entries)} kernels, {ds.n_samples} samples -> {out}")
    return 0


def cmd_pretrain(args, doc: dict) -> int:
    ds = load_dataset(_dataset_dir(doc))
    rep = _representation(doc)
    samples = dataset_samples(ds, augmented=rep == "super")
    cfg = _meta_config(doc, args.seed)
    gcn_dims, head_hidden = _model_dims(doc)
    rng = rng_from("pretrain", rep, args.seed)
    m = pretrain(samples, cfg, rng, gcn_dims=gcn_dims, head_hidden=head_hidden)
    out = args.out or "runs/model"
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, f"pretrained_{rep}.npz")
    save_model(m, ckpt)
    _write_manifest(
        out,
        {
            "command": "pretrain",
            "seed": args.seed,
            "config_hash": _config_hash(doc, args),
            "artifacts": {f"pretrained_{rep}": ckpt},
        },
    )
    print(f"pretrained ({rep}) -> {ckpt}")
    return 0


def cmd_metatrain(args, doc: dict) -> int:
    ds = load_dataset(_dataset_dir(doc))
    rep = _representation(doc)
    samples = dataset_samples(ds, augmented=rep == "super")
    cfg = _meta_config(doc, args.seed)
    ckpts = _section(doc, "checkpoints")
    start = ckpts.get("pretrained") or os.path.join(
        args.out or "runs/model", f"pretrained_{rep}.npz"
    )
    if not os.path.exists(start):
        raise ConfigError(f"pretrained checkpoint not found: {start}")
    m = load_model(start)
    out = args.out or "runs/model"
    os.makedirs(out, exist_ok=True)
    log = os.path.join(out, f"metatrain_{rep}_log.csv")
    rng = rng_from("metatrain", rep, args.seed)
    m = meta_train(m, samples, cfg, rng, log_path=log)
    ckpt = os.path.join(out, f"meta_{rep}.npz")
    save_model(m, ckpt)
    _write_manifest(
        out,
        {
            "command": "metatrain",
            "seed": args.seed,
            "config_hash": _config_hash(doc, args),
            "artifacts": {f"meta_{rep}": ckpt, "log": log},
        },
    )
    print(f"meta-trained ({rep}) -> {ckpt}")
    return 0


def _tune_kernel(doc: dict) -> KernelSpec:
    sec = _section(doc, "tune")
    k = sec.get("kernel")
    if not isinstance(k, dict):
        raise ConfigError("tune.kernel must be a mapping of kernel fields")
    return kernel_from_dict(k)


def cmd_tune(args, doc: dict) -> int:
    if not args.arm:
        raise ConfigError("tune requires --arm")
    if args.arm not in ARMS:
        raise ConfigError(f"unknown arm {args.arm!r}; valid arms: {ARMS}")
    spec = _tune_kernel(doc)
    sec = _section(doc, "tune")
    budget = int(sec.get("budget", 1000))
    batch = int(sec.get("batch", 16))
    profile = get_profile(args.profile or "platform-A")
    cfg = _tune_config(doc)
    model = None
    if args.arm.startswith("meta-"):
        rep = "super" if args.arm.endswith("-T") else "raw"
        ckpt = _section(doc, "checkpoints").get(rep) or sec.get("checkpoint")
        if not ckpt or not os.path.exists(ckpt):
            raise ConfigError(f"arm {args.arm!r} needs checkpoints.{rep} in the config")
        model = load_model(ckpt)
    prior = None
    if args.arm == "xgb-Xfer":
        src = sec.get("xfer_profile")
        if not src:
            raise ConfigError("arm 'xgb-Xfer' needs tune.xfer_profile in the config")
        dd = _section(doc, "dataset").get("dir")
        if not dd or not os.path.exists(os.path.join(dd, "manifest.json")):
            raise ConfigError(
                "arm 'xgb-Xfer' draws its priors from the training corpus; "
                "set dataset.dir to a gen-dataset output"
            )
        ds = load_dataset(dd)
        if spec.signature() in {e.spec.signature() for e in ds.entries}:
            raise ConfigError(
                f"kernel {spec.signature()} is in the training corpus; transfer "
                "priors must come from other kernels"
            )
        prior = xfer_prior_samples(ds, get_profile(src))
    rng = cell_rng(args.arm, spec, args.seed, profile.name)
    rec = tune(
        spec,
        args.arm,
        profile,
        budget,
        batch,
        cfg,
        rng,
        seed=args.seed,
        model=model,
        prior_samples=prior,
    )
    out = args.out or "runs/tune"
    os.makedirs(out, exist_ok=True)
    sig = spec.signature().replace("/", "-")
    rec_path = os.path.join(out, f"{args.arm}__{sig}__s{args.seed}.csv")
    with open(rec_path, "w", encoding="utf-8") as f:
        f.write(rec.to_csv())
    m = compute_metrics(rec)
    _write_manifest(
        out,
        {
            "command": "tune",
            "arm": args.arm,
            "seed": args.seed,
            "profile": profile.name,
            "config_hash": _config_hash(doc, args),
            "artifacts": {"record": rec_path},
        },
    )
    print(
        f"{args.arm} on {spec.signature()}: best {rec.final_best:.3f} GFLOPS "
        f"in {len(rec.rows)} measurements -> {rec_path}"
    )
    return 0


def _plan_from_config(doc: dict, args) -> ExperimentPlan:
    sec = _section(doc, "plan")
    kernels = []
    if "kernels_file" in sec:
        path = sec["kernels_file"]
        if not os.path.exists(path):
            raise ConfigError(f"plan.kernels_file not found: {path}")
        with open(path, encoding="utf-8") as f:
            kernels = kernels_from_yaml(f.read())
    elif "kernels" in sec:
        kernels = [kernel_from_dict(k) for k in sec["kernels"]]
    else:
        raise ConfigError("plan needs kernels_file or an inline kernels list")
    arms = tuple(sec.get("arms", ("xgb", "meta-BO", "meta-BO-T")))
    return ExperimentPlan(
        arms=arms,
        kernels=kernels,
        profile=args.profile or sec.get("profile", "platform-A"),
        budget=int(sec.get("budget", 1000)),
        batch=int(sec.get("batch", 16)),
        seeds=tuple(sec.get("seeds", list(range(10)))),
        xfer_profile=sec.get("xfer_profile"),
    )


def cmd_compare(args, doc: dict) -> int:
    plan = _plan_from_config(doc, args)
    ckpts = _section(doc, "checkpoints")
    models = {}
    for rep in ("raw", "super"):
        need = any(
            a.startswith("meta-") and (a.endswith("-T")) == (rep == "super") for a in plan.arms
        )
        if not need:
            continue
        path = ckpts.get(rep)
        if not path or not os.path.exists(path):
            raise ConfigError(f"plan has meta arms but checkpoints.{rep} is missing")
        models[rep] = load_model(path)
    dataset = None
    dd = _section(doc, "dataset").get("dir")
    if dd and os.path.exists(os.path.join(dd, "manifest.json")):
        dataset = load_dataset(dd)
    out = args.out or "runs/compare"
    cfg = _tune_config(doc)
    run_experiment(plan, out, models=models, cfg=cfg, dataset=dataset)
    _write_manifest(
        out,
        {"command": "compare", "seed": args.seed, "config_hash": _config_hash(doc, args)},
    )
    print(f"comparison complete -> {out}")
    return 0


def cmd_report(args, doc: dict) -> int:
    plan = _plan_from_config(doc, args)
    src = args.out or "runs/compare"
    rec_dir = os.path.join(src, "records")
    if not os.path.isdir(rec_dir):
        raise ConfigError(f"no records directory at {rec_dir}")
    records = {}
    for spec in plan.kernels:
        sig = spec.signature()
        safe = sig.replace("/", "-")
        for arm in plan.arms:
            for seed in plan.seeds:
                path = os.path.join(rec_dir, f"{arm}__{safe}__s{seed}.csv")
                if not os.path.exists(path):
                    raise ConfigError(f"missing record file {path}")
                with open(path, encoding="utf-8") as f:
                    records[(arm, sig, seed)] = TuningRecord.from_csv(
                        f.read(), spec=spec, arm=arm, seed=seed
                    )
    artifacts = write_report(plan, records, src)
    _write_manifest(
        src,
        {
            "command": "report",
            "seed": args.seed,
            "config_hash": _config_hash(doc, args),
            "artifacts": artifacts,
        },
    )
    print(f"report written -> {src}")
    return 0


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "pretrain": cmd_pretrain,
    "metatrain": cmd_metatrain,
    "tune": cmd_tune,
    "compare": cmd_compare,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="kerntune",
        description="auto-tuning with a meta-learned graph cost model on a synthetic oracle",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--arm", default=None, help="framework arm name")
        sp.add_argument("--profile", default=None, help="platform profile name")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = _load_config(args.config)
        return COMMANDS[args.command](args, doc)
    except (ConfigError, DomainError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
