"""Dataset generation, metrics, experiment orchestration, and the CLI."""

import csv
import json
import math
import os

import numpy as np
import pytest

import kerntune.cli as cli
from kerntune.baselines import random_search_arm
from kerntune.errors import ConfigError, DomainError, NumericError
from kerntune.harness import (
    DatasetParams,
    ExperimentPlan,
    compute_metrics,
    dataset_samples,
    default_plan,
    gen_dataset,
    load_dataset,
    run_experiment,
    sample_distinct_kernels,
    sample_kernel,
    save_dataset,
    top_quartile_rows,
    toy_kernel,
    toy_space,
    validate_heldout,
    xfer_prior_samples,
)
from kerntune.kernels import KernelSpec
from kerntune.oracle import get_profile
from kerntune.search import TuningRecord
from kerntune.util import rng_from

SMALL = DatasetParams(n_kernels=3, configs_per_kernel=12)


@pytest.fixture(scope="module")
def small_dataset():
    return gen_dataset(SMALL, rng_from("small-ds", 0))


# --- dataset ---------------------------------------------------------------------


def test_params_guards():
    with pytest.raises(DomainError):
        DatasetParams(n_kernels=0)
    with pytest.raises(DomainError):
        DatasetParams(input_range_1d=(600, 150))
    with pytest.raises(DomainError):
        DatasetParams(kernel_sizes=())


def test_sampled_kernels_respect_ranges():
    from kerntune.harness import ONE_D_OPS

    rng = rng_from("ranges")
    for _ in range(200):
        s = sample_kernel(DatasetParams(), rng)
        assert s.stride == 3 and s.padding == 1
        assert s.kernel_size in (1, 3, 5, 7)
        if s.op_type in ONE_D_OPS:
            assert 150 <= s.input_size <= 600
            assert 32 <= s.in_channels <= 128
            assert 32 <= s.out_channels <= 512
        else:
            assert 7 <= s.input_size <= 224
            assert 3 <= s.in_channels <= 128
            assert 16 <= s.out_channels <= 128


def test_distinct_kernels_exclude():
    rng = rng_from("distinct")
    first = sample_distinct_kernels(DatasetParams(), 5, rng)
    sigs = {s.signature() for s in first}
    assert len(sigs) == 5
    more = sample_distinct_kernels(DatasetParams(), 5, rng_from("distinct"),
                                   exclude=sigs)
    assert not sigs & {s.signature() for s in more}


def test_dataset_structure_and_determinism(small_dataset):
    ds = small_dataset
    assert len(ds.entries) == 3
    assert ds.n_samples == 36
    for e in ds.entries:
        assert len(e.indices) == 12
        assert len(set(int(i) for i in e.indices)) == 12  # without replacement
        assert (e.gflops[e.feasible] > 0).all()
        assert (e.gflops[~e.feasible] == 0).all()
    again = gen_dataset(SMALL, rng_from("small-ds", 0))
    assert again.content_hash() == ds.content_hash()
    other = gen_dataset(SMALL, rng_from("small-ds", 1))
    assert other.content_hash() != ds.content_hash()


def test_dataset_round_trip(tmp_path, small_dataset):
    d = str(tmp_path / "ds")
    manifest = save_dataset(small_dataset, d)
    assert manifest["n_samples"] == 36
    back = load_dataset(d)
    assert back.content_hash() == small_dataset.content_hash()
    assert back.params == small_dataset.params
    # tampering must be detected
    with open(os.path.join(d, "samples.csv"), "a", encoding="utf-8") as f:
        f.write("0,0,1.0,1\n")
    with pytest.raises(ConfigError):
        load_dataset(d)
    with pytest.raises(ConfigError):
        load_dataset(str(tmp_path / "missing"))


def test_dataset_samples_raw_and_augmented(small_dataset):
    raw = dataset_samples(small_dataset, augmented=False)
    aug = dataset_samples(small_dataset, augmented=True)
    assert len(raw) == len(aug) == 36
    assert all(s.label_gflops > 0 for s in raw)
    classes = {s.kernel_class for s in raw}
    assert len(classes) == 3
    # augmentation pads every graph to the same slot union, never removes
    for r, a in zip(raw, aug):
        assert len(a.graph.nodes) >= len(r.graph.nodes)
    assert len({len(a.graph.nodes) for a in aug}) == 1


def test_full_dataset_shape(full_dataset):
    assert len(full_dataset.entries) == 47
    assert full_dataset.n_samples == 47 * 200
    ops = {e.spec.op_type for e in full_dataset.entries}
    assert len(ops) >= 4  # the sampler mixes operator types


# --- metrics ---------------------------------------------------------------------


def rec_of(rows):
    return TuningRecord(spec=None, arm="t", seed=0, rows=rows)


def test_metrics_perfect_predictions():
    rows = [(i + 1, i, float(2 ** (i + 1)), float(2 ** (i + 1)), float(2 ** (i + 1)))
            for i in range(4)]
    m = compute_metrics(rec_of(rows))
    assert m["mse"] == 0.0 and m["mse_d"] == 0.0
    assert m["final_best_gflops"] == 16.0


def test_metrics_top_quartile_subset():
    # measurements 1,2,3,4: the top 25% is exactly the 4.0 row
    rows = [(i + 1, i, float(i + 1), float("nan"), float(i + 1)) for i in range(4)]
    sub = top_quartile_rows(rows)
    assert [r[2] for r in sub] == [4.0]
    # 5 rows -> k = 2
    rows5 = rows + [(5, 9, 5.0, float("nan"), 5.0)]
    assert [r[2] for r in top_quartile_rows(rows5)] == [4.0, 5.0]
    # ties keep the earliest iteration
    tied = [(1, 0, 2.0, 0.0, 2.0), (2, 1, 2.0, 0.0, 2.0), (3, 2, 1.0, 0.0, 2.0),
            (4, 3, 1.0, 0.0, 2.0)]
    assert [r[0] for r in top_quartile_rows(tied)] == [1]


def test_metrics_mse_hand_value():
    # two rows, predictions off by a known amount in log2 space
    rows = [(1, 0, 4.0, 8.0, 4.0), (2, 1, 16.0, 8.0, 16.0)]
    m = compute_metrics(rec_of(rows))
    # logs: 2 and 4 -> mu 3, sd 1; normed meas: -1, +1; preds: 0, 0
    assert m["mse"] == pytest.approx(1.0)
    assert m["mse_d"] == pytest.approx(1.0)  # top quartile = the 16.0 row


def test_metrics_against_xgb_reference():
    rows = [(1, 0, 2.0, float("nan"), 2.0), (2, 1, 6.0, float("nan"), 6.0),
            (3, 2, 1.0, float("nan"), 6.0)]
    m = compute_metrics(rec_of(rows), xgb_final_best=4.0)
    assert m["normalized_to_xgb"] == pytest.approx(1.5)
    assert m["iters_to_xgb_best"] == 2
    m2 = compute_metrics(rec_of(rows), xgb_final_best=100.0)
    assert m2["iters_to_xgb_best"] is None
    # constant best curve reaches itself immediately
    flat = [(1, 0, 5.0, float("nan"), 5.0), (2, 1, 3.0, float("nan"), 5.0)]
    assert compute_metrics(rec_of(flat), xgb_final_best=5.0)["iters_to_xgb_best"] == 1
    # no predictions anywhere -> error metrics absent
    assert m["mse"] is None and m["mse_d"] is None
    with pytest.raises(DomainError):
        compute_metrics(rec_of([]))


# --- plans and orchestration ----------------------------------------------------------


def test_plan_guards():
    k = [toy_kernel()]
    with pytest.raises(DomainError):
        ExperimentPlan(arms=(), kernels=k)
    with pytest.raises(ConfigError):
        ExperimentPlan(arms=("hillclimb",), kernels=k)
    with pytest.raises(DomainError):
        ExperimentPlan(arms=("random",), kernels=k, seeds=(0, 0))
    with pytest.raises(DomainError):
        ExperimentPlan(arms=("random",), kernels=[])
    with pytest.raises(ConfigError):
        ExperimentPlan(arms=("xgb-Xfer",), kernels=k)  # no xfer_profile


def test_validate_heldout(small_dataset):
    inside = small_dataset.entries[0].spec
    plan = ExperimentPlan(arms=("random",), kernels=[inside])
    with pytest.raises(ConfigError):
        validate_heldout(plan, small_dataset)
    outside = KernelSpec(op_type="conv2d", input_size=10, in_channels=5,
                         out_channels=17, kernel_size=1, stride=3, padding=1)
    validate_heldout(
        ExperimentPlan(arms=("random",), kernels=[outside]), small_dataset
    )


def test_default_plan_is_heldout(full_dataset):
    plan = default_plan()
    assert len(plan.kernels) == 4
    assert plan.budget == 1000 and plan.batch == 16
    assert len(plan.seeds) == 10
    validate_heldout(plan, full_dataset)


def test_xfer_priors_come_from_the_corpus(small_dataset):
    priors = xfer_prior_samples(small_dataset, get_profile("platform-B"),
                                per_kernel=4)
    assert len(priors) == 12
    for f, y in priors:
        assert f.shape == (20,)
        assert math.isfinite(y)
    # labels follow the source platform
    other = xfer_prior_samples(small_dataset, get_profile("platform-A"),
                               per_kernel=4)
    assert any(a[1] != b[1] for a, b in zip(priors, other))


def mini_plan(arms=("random",), seeds=(0, 1)):
    return ExperimentPlan(arms=arms, kernels=[toy_kernel()], budget=12,
                          batch=4, seeds=seeds)


def test_run_experiment_writes_and_resumes(tmp_path):
    out = str(tmp_path / "exp")
    got = run_experiment(mini_plan(), out)
    recs = got["records"]
    assert len(recs) == 2
    rec_dir = os.path.join(out, "records")
    files = sorted(os.listdir(rec_dir))
    assert len(files) == 2
    for name in ("metrics.csv", "summary.csv", "plotdata.csv", "bundle.csv",
                 "manifest.json"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "metrics.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert all(r["arm"] == "random" for r in rows)

    # rerun: completed cells are loaded, not recomputed
    before = {f: os.stat(os.path.join(rec_dir, f)).st_mtime_ns for f in files}
    again = run_experiment(mini_plan(), out)
    after = {f: os.stat(os.path.join(rec_dir, f)).st_mtime_ns for f in files}
    assert before == after
    for k in recs:
        assert again["records"][k].to_csv() == recs[k].to_csv()


def test_run_experiment_xgb_self_normalization(tmp_path):
    out = str(tmp_path / "exp2")
    run_experiment(mini_plan(arms=("xgb",), seeds=(0,)), out)
    with open(os.path.join(out, "metrics.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert float(rows[0]["normalized_to_xgb"]) == 1.0
    assert rows[0]["iters_to_xgb_best"] != ""


def test_run_experiment_xfer_needs_dataset(tmp_path):
    plan = ExperimentPlan(arms=("xgb-Xfer",), kernels=[toy_kernel()], budget=8,
                          batch=4, seeds=(0,), xfer_profile="platform-A")
    with pytest.raises(ConfigError):
        run_experiment(plan, str(tmp_path / "x"))


def test_run_experiment_xfer_with_corpus(tmp_path, small_dataset):
    plan = ExperimentPlan(
        arms=("xgb-Xfer",),
        kernels=[toy_kernel()],
        budget=8,
        batch=4,
        seeds=(0,),
        profile="platform-B",
        xfer_profile="platform-A",
    )
    got = run_experiment(plan, str(tmp_path / "x2"), dataset=small_dataset)
    rec = next(iter(got["records"].values()))
    assert len(rec.rows) == 8
    # warm-started booster predicts from the first round
    assert all(math.isfinite(r[3]) for r in rec.rows)


def test_meta_arm_without_checkpoint_fails_fast(tmp_path):
    plan = mini_plan(arms=("meta-BO",), seeds=(0,))
    with pytest.raises(ConfigError, match="raw"):
        run_experiment(plan, str(tmp_path / "m"))


def test_random_arm_matches_order_statistics(golden_dir):
    # expected best rank of n uniform draws without replacement from N values
    # is n(N+1)/(n+1); the toy golden file provides the exact value order
    with open(golden_dir / "toy256_platform-A.csv", newline="") as f:
        vals = [float(r["gflops"]) for r in csv.DictReader(f)]
    vals = np.asarray(vals)
    spec = toy_kernel()
    space = toy_space()
    profile = get_profile("platform-A")
    n, big_n, reps = 32, 256, 60
    qs = []
    for s in range(reps):
        rec = random_search_arm(spec, profile, n, rng_from("ostat", s),
                                batch=8, space=space, seed=s)
        qs.append((vals <= rec.final_best).sum() / big_n)
    want = n * (big_n + 1) / ((n + 1) * big_n)
    assert abs(float(np.mean(qs)) - want) < 0.012


# --- CLI -----------------------------------------------------------------------------


def write_config(tmp_path, doc):
    import yaml
    p = tmp_path / "config.yaml"
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def test_cli_gen_dataset_and_manifest(tmp_path):
    cfgp = write_config(tmp_path, {"dataset": {"n_kernels": 2, "configs_per_kernel": 6}})
    out = str(tmp_path / "ds")
    rc = cli.main(["gen-dataset", "--config", cfgp, "--seed", "0", "--out", out])
    assert rc == 0
    with open(os.path.join(out, "manifest.json")) as f:
        man = json.load(f)
    assert man["n_samples"] == 12
    ds = load_dataset(out)
    assert len(ds.entries) == 2


def test_cli_tune_random(tmp_path):
    kd = {
        "op_type": "conv2d", "input_size": 64, "in_channels": 32,
        "out_channels": 64, "kernel_size": 3, "stride": 1, "padding": 1,
    }
    cfgp = write_config(tmp_path, {"tune": {"kernel": kd, "budget": 8, "batch": 4}})
    out = str(tmp_path / "run")
    rc = cli.main(["tune", "--config", cfgp, "--arm", "random", "--out", out])
    assert rc == 0
    files = os.listdir(out)
    assert "manifest.json" in files
    recs = [f for f in files if f.endswith(".csv")]
    assert len(recs) == 1
    text = open(os.path.join(out, recs[0])).read()
    assert len(text.splitlines()) == 9  # header + 8 rows


def test_cli_exit_codes(tmp_path, monkeypatch):
    # missing config file
    assert cli.main(["tune", "--config", str(tmp_path / "nope.yaml")]) == 2
    # tune without --arm
    cfgp = write_config(tmp_path, {})
    assert cli.main(["tune", "--config", cfgp]) == 2
    # unknown arm
    assert cli.main(["tune", "--config", cfgp, "--arm", "hillclimb"]) == 2
    # numeric failures map to 3
    def boom(args, doc):
        raise NumericError("did not converge")
    monkeypatch.setitem(cli.COMMANDS, "report", boom)
    assert cli.main(["report"]) == 3


def test_cli_xfer_requires_corpus(tmp_path):
    kd = {
        "op_type": "conv2d", "input_size": 64, "in_channels": 32,
        "out_channels": 64, "kernel_size": 3, "stride": 1, "padding": 1,
    }
    cfgp = write_config(
        tmp_path,
        {"tune": {"kernel": kd, "budget": 8, "batch": 4, "xfer_profile": "platform-A"}},
    )
    assert cli.main(["tune", "--config", cfgp, "--arm", "xgb-Xfer"]) == 2
