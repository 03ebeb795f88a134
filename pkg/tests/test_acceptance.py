"""Release gate: one test per numbered acceptance check.

Each test is self-contained and deterministic; the slow ones (7 through 9)
reuse the session-scoped corpus and trained checkpoints from conftest.  The
summary hook in conftest prints a per-criterion pass/fail table at the end.
"""

import math
import statistics
import time
from dataclasses import replace

import numpy as np

from kerntune.graphs import (
    augment_to_super,
    build_super_template,
    config_graph,
    feature_multiset,
    graph_to_tensors,
)
from kerntune.harness import (
    DatasetParams,
    compute_metrics,
    default_plan,
    enumerate_space,
    run_cell,
    run_experiment,
    sample_distinct_kernels,
    sample_kernel,
    toy_kernel,
    toy_space,
)
from kerntune.kernels import OP_TYPES, build_knob_space, index_config
from kerntune.meta import (
    LabeledSample,
    MetaConfig,
    dataset_norms,
    fine_tune,
    maml_outer_grad,
    meta_step,
    meta_train,
    sample_meta_tasks,
)
from kerntune.model import (
    LABEL_FLOOR_GFLOPS,
    aggregate,
    embed,
    forward,
    grad,
    head_forward,
    head_loss_grad,
    head_to_vec,
    init_model,
    load_model,
    loss,
    normalize_features,
    normalize_label,
    save_model,
    tensors_for,
)
from kerntune.oracle import get_profile, measure
from kerntune.search import (
    GpSurrogate,
    TuneConfig,
    TuningRecord,
    bo_search,
    draw_unvisited,
    gp_fit,
    gp_kernel,
    gp_predict_many,
    sa_search,
)
from kerntune.util import rng_from


# --- 1: reverse-mode gradients against central finite differences ----------------

# Secant width is 1e-5, so every ReLU pre-activation and every max-pool gap
# must clear a margin well above it or the difference quotient straddles a
# kink and measures the wrong one-sided slope.  Instances are admitted only
# at interior points; that conditions on differentiability, not on the test
# outcome.
_FD_H = 1e-5
_KINK_MARGIN = 5e-4


def _kink_free(m, batch):
    for graph, _ in batch:
        t = tensors_for(graph)
        adj = t.normalized_adjacency
        x = normalize_features(m, t.feature_matrix, t.feature_mask)
        h = x
        # rows that stay exactly zero under any weight perturbation
        stable_zero = np.abs(x).sum(axis=1) == 0.0
        for w in m.gcn.layers:
            pre = (adj @ h) @ w
            live = (adj @ (~stable_zero).astype(float)) > 0.0
            if live.any() and np.abs(pre[live]).min() <= _KINK_MARGIN:
                return False
            h = np.maximum(pre, 0.0)
            stable_zero = ~live | ((pre < -_KINK_MARGIN).all(axis=1) & live)
        for c in range(h.shape[1]):
            v = h[:, c]
            vmax = v.max()
            if vmax == 0.0:
                continue  # dead channel, stable by the margins above
            if (v == vmax).sum() > 1:
                return False
            below = v[v < vmax]
            if below.size and vmax - below.max() <= _KINK_MARGIN:
                return False
        a = aggregate(h, m.agg)
        last = len(m.head.weights) - 1
        for i, (w, b) in enumerate(zip(m.head.weights, m.head.biases)):
            z = a @ w + b
            if i < last:
                if np.abs(z).min() <= _KINK_MARGIN:
                    return False
                a = np.maximum(z, 0.0)
    return True


def _batch_loss(m, batch):
    return loss(
        [forward(g, m) for g, _ in batch],
        [normalize_label(m, v) for _, v in batch],
    )


def test_01_gradients_match_finite_differences():
    t0 = time.time()
    params = DatasetParams()
    for i in range(20):
        rng = rng_from("fd-check", i)
        spec = sample_kernel(params, rng)
        space = build_knob_space(spec)
        batch = []
        for _ in range(1 + i % 3):
            c = index_config(space, int(rng.integers(space.size)))
            label = float(2.0 ** rng.uniform(0.0, 12.0))
            batch.append((config_graph(spec, c, space), label))
        fnorm, lnorm = dataset_norms(
            [LabeledSample(graph=g, kernel_class="fd", label_gflops=v) for g, v in batch]
        )
        m = None
        for attempt in range(200):
            cand = replace(
                init_model(rng_from("fd-model", i, attempt), gcn_dims=(4, 4), head_hidden=(5, 5)),
                feature_norm=fnorm,
                label_norm=lnorm,
            )
            if _kink_free(cand, batch):
                m = cand
                break
        assert m is not None, f"instance {i}: no kink-free init within 200 draws"

        _, g = grad(m, batch)
        arrays = list(m.gcn.layers) + [m.agg.sum_weights] + list(m.head.weights) + list(m.head.biases)
        grads = list(g.gcn) + [g.agg] + list(g.head_weights) + list(g.head_biases)
        for p, ga in zip(arrays, grads):
            fp, fg = p.reshape(-1), ga.reshape(-1)
            for j in range(fp.size):
                orig = fp[j]
                fp[j] = orig + _FD_H
                lp = _batch_loss(m, batch)
                fp[j] = orig - _FD_H
                lm = _batch_loss(m, batch)
                fp[j] = orig
                fd = (lp - lm) / (2 * _FD_H)
                an = fg[j]
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                assert rel < 1e-4, f"instance {i}: fd={fd!r} analytic={an!r} rel={rel:.3e}"
    assert time.time() - t0 < 30.0


# --- 2: degenerate learning rates reduce the meta loop exactly -------------------


def _reduction_samples():
    params = DatasetParams()
    kernels = sample_distinct_kernels(params, 3, rng_from("reduction-kernels"))
    prof = get_profile("platform-A")
    samples = []
    for spec in kernels:
        space = build_knob_space(spec)
        krng = rng_from("reduction-samples", spec.signature())
        for idx in krng.choice(space.size, size=4, replace=False):
            c = index_config(space, int(idx))
            v = measure(spec, c, prof, space).gflops
            samples.append(
                LabeledSample(
                    graph=config_graph(spec, c, space),
                    kernel_class=spec.signature(),
                    label_gflops=max(v, LABEL_FLOOR_GFLOPS),
                )
            )
    return samples


def test_02_maml_reductions_are_exact():
    samples = _reduction_samples()
    fnorm, lnorm = dataset_norms(samples)
    m = replace(
        init_model(rng_from("reduction-model"), gcn_dims=(8, 8), head_hidden=(16,)),
        feature_norm=fnorm,
        label_norm=lnorm,
    )

    # alpha=0: the inner loop is a no-op, so one outer step must equal plain
    # SGD on the pooled query sets (sum over tasks, lr beta)
    cfg = MetaConfig(alpha=0.0, beta=0.007, n_way=3, k_shot=1, meta_batch=4, inner_steps=2)
    tasks = sample_meta_tasks(samples, cfg, rng_from("reduction-tasks"))
    stepped, _ = meta_step(m, tasks, cfg)

    theta = head_to_vec(m.head)
    outer = np.zeros_like(theta)
    for task in tasks:
        uq = np.stack([embed(s.graph, m) for s in task.query])
        yq = np.array(
            [
                (math.log2(max(s.label_gflops, LABEL_FLOOR_GFLOPS)) - m.label_norm.mean)
                / m.label_norm.std
                for s in task.query
            ]
        )
        _, gq = head_loss_grad(theta, m.head, uq, yq)
        outer += gq
    want = theta - cfg.beta * outer
    assert np.abs(head_to_vec(stepped.head) - want).max() < 1e-12

    # beta=0: meta_train must return the model unchanged, bit for bit
    cfg0 = MetaConfig(beta=0.0, outer_steps=4, n_way=3, k_shot=1, meta_batch=3)
    trained = meta_train(m, samples, cfg0, rng_from("reduction-train"))
    for a, b in zip(trained.head.weights, m.head.weights):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(trained.head.biases, m.head.biases):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(trained.gcn.layers, m.gcn.layers):
        assert a.tobytes() == b.tobytes()
    assert trained.agg.sum_weights.tobytes() == m.agg.sum_weights.tobytes()


# --- 3: the one-dimensional quadratic family has a closed form -------------------


def test_03_quadratic_maml_matches_analytic():
    # L_s(t) = (t - c_s)^2 has constant curvature 2, so k inner steps contract
    # toward c_s by (1 - 2a)^k and the outer Jacobian is the same factor.
    rng = rng_from("maml-quad")
    beta = MetaConfig().beta
    for _ in range(50):
        t0 = float(rng.uniform(-1, 1))
        cs = float(rng.uniform(-1, 1))
        cq = float(rng.uniform(-1, 1))
        alpha = float(rng.choice([0.3, 0.07, 0.011]))
        k = int(rng.integers(1, 4))
        theta = np.array([t0])
        sup = lambda t: (float((t[0] - cs) ** 2), 2.0 * (t - cs))
        qry = lambda t: (float((t[0] - cq) ** 2), 2.0 * (t - cq))
        hvp = lambda t, v: 2.0 * v

        _, _, g_so, _ = maml_outer_grad(theta, sup, qry, alpha, k, first_order=False, support_hvp=hvp)
        adapted = cs + (1.0 - 2.0 * alpha) ** k * (t0 - cs)
        analytic = (1.0 - 2.0 * alpha) ** k * 2.0 * (adapted - cq)
        assert abs(float(g_so[0]) - analytic) < 1e-10

        # with a vanishing inner rate the curvature correction is second order,
        # so the applied updates of both variants coincide
        _, _, gf, _ = maml_outer_grad(theta, sup, qry, 1e-6, 1, first_order=True)
        _, _, gs, _ = maml_outer_grad(theta, sup, qry, 1e-6, 1, first_order=False, support_hvp=hvp)
        assert abs(float(beta * gs[0] - beta * gf[0])) < 1e-8


# --- 4: every op type lands on the same super-graph skeleton ---------------------


def test_04_super_graph_structural_uniformity():
    t0 = time.time()
    params = DatasetParams()
    template = build_super_template(OP_TYPES)
    ref = None
    for op in OP_TYPES:
        rng = rng_from("uniformity", op)
        n = 0
        while n < 100:
            spec = sample_kernel(params, rng)
            if spec.op_type != op:
                continue
            n += 1
            space = build_knob_space(spec)
            c = index_config(space, int(rng.integers(space.size)))
            raw = config_graph(spec, c, space)
            aug = augment_to_super(raw, template, op)
            blob = graph_to_tensors(aug).normalized_adjacency.tobytes()
            if ref is None:
                ref = blob
            assert blob == ref, f"{op}: adjacency deviates from the shared skeleton"
            assert feature_multiset(aug) == feature_multiset(raw)
    assert time.time() - t0 < 10.0


# --- 5: GP posterior against a dense-solve oracle --------------------------------


def test_05_gp_matches_dense_solve_oracle():
    for i in range(50):
        rng = rng_from("gp-oracle", i)
        d = 1 + i % 3
        n = 6 + int(rng.integers(0, 25))
        x = rng.random((n, d))
        y = rng.standard_normal(n)
        s = gp_fit(GpSurrogate(x=x, y=y, noise_variance=1e-4))
        xq = rng.random((8, d))
        mean, var = gp_predict_many(s, xq)

        k = gp_kernel(x, x, s.lengthscales) + s.fitted_noise * np.eye(n)
        kq = gp_kernel(x, xq, s.lengthscales)
        kinv = np.linalg.inv(k)
        assert np.abs(mean - kq.T @ kinv @ y).max() < 1e-8
        assert np.abs(var - (1.0 - np.einsum("ij,ik,kj->j", kq, kinv, kq))).max() < 1e-8

        # more observations can only shrink posterior variance when the
        # hyperparameters are held fixed
        ls = np.ones(d)
        a = gp_fit(GpSurrogate(x=x[: n // 2], y=y[: n // 2], lengthscales=ls), select_lengthscale=False)
        b = gp_fit(GpSurrogate(x=x, y=y, lengthscales=ls), select_lengthscale=False)
        _, va = gp_predict_many(a, xq)
        _, vb = gp_predict_many(b, xq)
        assert (vb <= va + 1e-12).all()


# --- 6: searchers against the enumerated toy space -------------------------------


def test_06_toy_space_search_sanity():
    t0 = time.time()
    spec, space, prof = toy_kernel(), toy_space(), get_profile("platform-A")
    table = enumerate_space(spec, space, prof)
    best_idx = max(table, key=lambda r: r[1])[0]

    def gf(c):
        return measure(spec, c, prof, space).gflops

    def hits(runner):
        count = 0
        for s in range(20):
            res = runner(s)
            count += int(max(res, key=res.get) == best_idx)
        return count

    bo_hits = hits(lambda s: bo_search(gf, space, 64, rng_from("bo-sanity", s)))
    sa_hits = hits(lambda s: sa_search(gf, space, 64, rng_from("sa-sanity", s)))
    rand_hits = hits(
        lambda s: {
            int(i): gf(index_config(space, int(i)))
            for i in draw_unvisited(space, set(), 64, rng_from("rand-sanity", s))
        }
    )
    assert bo_hits >= 18, f"batch BO found the optimum in only {bo_hits}/20 seeds"
    assert sa_hits >= 14, f"annealing found the optimum in only {sa_hits}/20 seeds"
    assert rand_hits < 12, f"random search is implausibly strong: {rand_hits}/20"
    assert time.time() - t0 < 60.0


# --- 7: few-shot adaptation beats a fresh head -----------------------------------


def test_07_few_shot_adaptation_gain(full_dataset, trained_models):
    t0 = time.time()
    params = DatasetParams()
    corpus = {e.spec.signature() for e in full_dataset.entries}
    classes = sample_distinct_kernels(params, 5, rng_from("adapt-classes", 0), exclude=corpus)
    m = trained_models["raw"]
    prof = get_profile(params.profile)
    cfg = TuneConfig()

    wins = 0
    cells = 0
    for spec in classes:
        space = build_knob_space(spec)
        for seed in range(20):
            rng = rng_from("adapt-gain", spec.signature(), seed)
            idx = rng.choice(space.size, size=25, replace=False)
            graphs = [config_graph(spec, index_config(space, int(i)), space) for i in idx]
            vals = [measure(spec, index_config(space, int(i)), prof, space).gflops for i in idx]
            support = [(g, max(v, LABEL_FLOOR_GFLOPS)) for g, v in zip(graphs[:5], vals[:5])]
            query = list(zip(graphs[5:], vals[5:]))
            y = np.array([normalize_label(m, max(v, LABEL_FLOOR_GFLOPS)) for _, v in query])

            tuned = fine_tune(m, support, cfg.fine_tune_alpha, cfg.fine_tune_steps)
            meta_mse = loss([head_forward(embed(g, tuned), tuned.head) for g, _ in query], y)

            fresh = replace(m, head=init_model(rng_from("adapt-fresh", spec.signature(), seed)).head)
            fresh = fine_tune(fresh, support, cfg.fine_tune_alpha, cfg.fine_tune_steps)
            fresh_mse = loss([head_forward(embed(g, fresh), fresh.head) for g, _ in query], y)

            cells += 1
            wins += int(meta_mse < fresh_mse)
    assert wins >= 0.8 * cells, f"meta head won only {wins}/{cells} cells"
    assert time.time() - t0 < 300.0


# --- 8: arm ordering and catch-up speed on the default plan ----------------------


def test_08_default_plan_arm_ordering(full_dataset, trained_models, tmp_path):
    t0 = time.time()
    plan = default_plan()
    res = run_experiment(plan, str(tmp_path / "default"), models=trained_models)
    records = res["records"]

    finals = {}
    for (arm, sig, seed), rec in records.items():
        finals.setdefault(arm, []).append(rec.rows[-1][4])
    med = {arm: statistics.median(v) for arm, v in finals.items()}
    assert med["meta-BO-T"] >= med["meta-BO"] >= med["xgb"], f"arm medians out of order: {med}"

    xgb_final = {
        (sig, seed): rec.rows[-1][4] for (arm, sig, seed), rec in records.items() if arm == "xgb"
    }
    catch_up = []
    for (arm, sig, seed), rec in records.items():
        if arm != "meta-BO-T":
            continue
        target = xgb_final[(sig, seed)]
        catch_up.append(next((r[0] for r in rec.rows if r[4] >= target), math.inf))
    assert statistics.median(catch_up) <= 650, f"median catch-up {statistics.median(catch_up)}"
    assert time.time() - t0 < 1800.0


# --- 9: a checkpoint trained on one platform tuned on the other ------------------


def test_09_cross_platform_transfer(full_dataset, trained_models, tmp_path):
    t0 = time.time()
    base = default_plan()
    kern = next(k for k in base.kernels if k.op_type == "depthwise")
    plan = replace(
        base,
        kernels=(kern,),
        arms=("xgb-Xfer", "meta-BO-T"),
        budget=640,
        profile="platform-B",
        xfer_profile="platform-A",
    )
    res = run_experiment(plan, str(tmp_path / "xplat"), models=trained_models, dataset=full_dataset)

    finals = {}
    for (arm, sig, seed), rec in res["records"].items():
        finals.setdefault(arm, []).append(rec.rows[-1][4])
    meta_med = statistics.median(finals["meta-BO-T"])
    xfer_med = statistics.median(finals["xgb-Xfer"])
    assert meta_med >= xfer_med, f"transferred model lags: {meta_med} < {xfer_med}"
    assert time.time() - t0 < 900.0


# --- 10: cells and checkpoints are bit-reproducible -------------------------------


def test_10_rerun_determinism_and_checkpoints(trained_models, tmp_path):
    base = default_plan()
    plan = replace(base, kernels=(base.kernels[0],), budget=96)
    cfg = TuneConfig()

    a = run_cell(plan, "xgb", plan.kernels[0], 3, cfg)
    b = run_cell(plan, "xgb", plan.kernels[0], 3, cfg)
    assert a.to_csv() == b.to_csv()

    template = build_super_template(OP_TYPES)
    c = run_cell(plan, "meta-BO-T", plan.kernels[0], 3, cfg, models=trained_models, template=template)
    d = run_cell(plan, "meta-BO-T", plan.kernels[0], 3, cfg, models=trained_models, template=template)
    assert c.to_csv() == d.to_csv()

    p1, p2 = tmp_path / "ck1.npz", tmp_path / "ck2.npz"
    save_model(trained_models["raw"], p1)
    reloaded = load_model(p1)
    save_model(reloaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    again = load_model(p2)
    for w1, w2 in zip(trained_models["raw"].head.weights, again.head.weights):
        assert np.array_equal(w1, w2)
    for w1, w2 in zip(trained_models["raw"].gcn.layers, again.gcn.layers):
        assert np.array_equal(w1, w2)


# --- 11: the record error metric, checked digit for digit -------------------------


def test_11_record_error_metric_by_hand():
    # measurements 2^1..2^8 make every log2 exact; predictions one octave high
    rows = []
    best = 0.0
    for i in range(1, 9):
        measured = 2.0 ** i
        best = max(best, measured)
        rows.append((i, i - 1, measured, 2.0 ** (i + 1), best))
    rec = TuningRecord(spec=toy_kernel(), arm="xgb", seed=0, rows=rows)
    got = compute_metrics(rec)

    # mean of logs {1..8} is 4.5 and their population variance is 5.25, both
    # exact in binary, so the reference can be spelled out literally
    sd = math.sqrt(5.25)
    errs = [((i + 1 - 4.5) / sd - (i - 4.5) / sd) ** 2 for i in range(1, 9)]
    assert got["mse"] == sum(errs) / 8
    # top quartile of 8 rows keeps the 2 highest measurements (i = 7, 8)
    assert got["mse_d"] == (errs[6] + errs[7]) / 2
    assert got["final_best_gflops"] == 256.0
    assert got["normalized_to_xgb"] is None and got["iters_to_xgb_best"] is None
