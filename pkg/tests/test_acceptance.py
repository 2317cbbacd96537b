"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from fvstack import pipeline
from fvstack.config import NetConfig, PipelineConfig
from fvstack.container import save_container
from fvstack.descriptor_io import ChannelSpec, SynthSpec, dafs_stack, make_variants, synth_generate
from fvstack.fv import FisherVector, finalize_video, fv_pool
from fvstack.gmm import FitConfig, GmmModel, em_trace
from fvstack.net import AdamState, adam_step, backward, build_mlp, forward, loss, one_hot, predict
from fvstack.reduction import pca_fit, project


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail, started):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail} ({time.time() - started:.1f}s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


# -- 1 ------------------------------------------------------------------------------


def test_01_dimensional_fidelity(report):
    t0 = time.time()
    cfg = PipelineConfig()  # Traj/HOG/HOF/MBHx/MBHy, factor-2 PCA, STA, K=256
    assert [c.raw_dim for c in cfg.channels] == [30, 96, 108, 96, 96] and cfg.gmm.K == 256
    dims = list(cfg.fv_dims().values())
    ok = dims == [9216, 26112, 29184, 26112, 26112] and cfg.representation_dim() == 116_736
    report(1, "dimensional fidelity", ok, f"per-channel {dims}, total {cfg.representation_dim()}", t0)


# -- 2 ------------------------------------------------------------------------------


def _naive_fv(weights, means, stds, rows):
    """Per-row Fisher vector with the posterior computed from explicit densities."""
    K, D = means.shape
    total = np.zeros(2 * K * D)
    for x in rows:
        dens = np.array([
            weights[k] * np.prod(np.exp(-0.5 * ((x - means[k]) / stds[k]) ** 2) / (np.sqrt(2 * np.pi) * stds[k]))
            for k in range(K)
        ])
        gamma = dens / dens.sum()
        parts = []
        for k in range(K):
            z = (x - means[k]) / stds[k]
            parts.append(gamma[k] / np.sqrt(weights[k]) * z)
            parts.append(gamma[k] / np.sqrt(2 * weights[k]) * (z * z - 1))
        total += np.concatenate(parts)
    return total


def test_02_fv_oracle_equivalence(report):
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        K, D, n = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 65)
        w = rng.random(K) + 0.1
        w /= w.sum()
        mu = rng.standard_normal((K, D))
        sd = rng.uniform(0.5, 2.0, (K, D))
        rows = rng.standard_normal((n, D)) * 1.5
        got = fv_pool(GmmModel(w, mu, sd), rows).values
        want = _naive_fv(w, mu, sd, rows)
        worst = max(worst, float(np.max(np.abs(got - want)) / np.max(np.abs(want))))
    report(2, "FV oracle equivalence", worst <= 1e-10,
           f"max relative deviation {worst:.2e} over 100 instances (tol 1e-10)", t0)


# -- 3 ------------------------------------------------------------------------------


def test_03_em_monotonicity(report):
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(50):
        K = int(rng.integers(1, 9))
        D = int(rng.integers(1, 6))
        n = int(rng.integers(50, 400))
        centers = rng.standard_normal((rng.integers(1, 6), D)) * 4
        X = centers[rng.integers(len(centers), size=n)] + rng.standard_normal((n, D)) * rng.uniform(0.2, 2, D)
        _, lls = em_trace(X, FitConfig(K=K, em_iters=15, sample_size=max(K, n), seed=i))
        for a, b in zip(lls, lls[1:]):
            worst = max(worst, (a - b) / abs(a))
    report(3, "EM monotonicity", worst <= 1e-8,
           f"largest relative log-likelihood drop {max(worst, 0):.2e} over 50 fits (tol 1e-8)", t0)


# -- 4 ------------------------------------------------------------------------------


def test_04_pca_path_equivalence(report):
    t0 = time.time()
    rng = np.random.default_rng(4)
    worst_proj, worst_white = 0.0, 0.0
    for _ in range(100):
        n, d = int(rng.integers(3, 65)), int(rng.integers(2, 65))
        X = rng.standard_normal((n, d)) * rng.uniform(0.5, 3, d)
        r = int(rng.integers(1, min(n - 1, d) + 1))
        a = project(pca_fit(X, r, method="covariance"), X)
        b = project(pca_fit(X, r, method="gram"), X)
        signs = np.sign(np.sum(a * b, axis=0))
        worst_proj = max(worst_proj, float(np.max(np.abs(a - b * signs))))
        Z = project(pca_fit(X, r, whiten=True), X)
        worst_white = max(worst_white, float(np.max(np.abs(Z.T @ Z / n - np.eye(r)))))
    ok = worst_proj <= 1e-8 and worst_white <= 1e-6
    report(4, "PCA path equivalence", ok,
           f"projection gap {worst_proj:.2e} (tol 1e-8), whitened covariance gap {worst_white:.2e} (tol 1e-6)", t0)


# -- 5 ------------------------------------------------------------------------------


def _grad_error(model, X, Y, h=1e-5):
    _, caches = forward(model, X, "train")
    grads = backward(model, caches, Y)
    worst, worst_abs_zero = 0.0, 0.0
    for key, p in model.params().items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss(forward(model, X, "train")[0], Y, model.task, "mean")
            p[idx] = old - h
            down = loss(forward(model, X, "train")[0], Y, model.task, "mean")
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        scale = np.maximum(np.abs(num), np.abs(grads[key]))
        diff = np.abs(num - grads[key])
        sig = scale > 1e-6  # below this the central difference is rounding noise
        worst = max(worst, float((diff[sig] / scale[sig]).max(initial=0.0)))
        worst_abs_zero = max(worst_abs_zero, float(diff[~sig].max(initial=0.0)))
    return worst, worst_abs_zero


def test_05_gradient_correctness(report):
    t0 = time.time()
    results = {}
    for depth, bn, task in itertools.product((1, 2, 3), (False, True), ("multiclass", "multilabel")):
        rng = np.random.default_rng(depth * 100 + bn * 10 + (task == "multilabel"))
        model = build_mlp(6, 4, hidden=(7,) * (depth - 1), task=task, bn=bn, seed=depth)
        for layer in model.layers:
            layer.b[:] = rng.uniform(-0.5, 0.5, layer.b.shape)  # keep ReLU inputs away from 0
            if bn and layer.spec.has_bn:
                layer.gamma[:] = rng.uniform(0.5, 1.5, layer.gamma.shape)
                layer.beta[:] = rng.uniform(-0.5, 0.5, layer.beta.shape)
        X = rng.standard_normal((8, 6))
        Y = one_hot(rng.integers(4, size=8), 4) if task == "multiclass" else (rng.random((8, 4)) < 0.5) * 1.0
        results[(depth, bn, task)] = _grad_error(model, X, Y)
    worst = max(r[0] for r in results.values())
    worst_zero = max(r[1] for r in results.values())
    ok = worst < 1e-4 and worst_zero < 1e-8
    report(5, "gradient correctness", ok,
           f"max relative error {worst:.2e} over {len(results)} configurations (tol 1e-4); "
           f"zero-gradient entries within {worst_zero:.1e}", t0)


# -- 6 ------------------------------------------------------------------------------


def test_06_adam_first_step(report):
    t0 = time.time()
    alpha = 1e-3
    p = {"w": np.array([0.0])}
    adam_step(AdamState(lr=alpha), p, {"w": np.array([1.0])})
    step = -p["w"][0]
    rel = abs(step - alpha) / alpha
    report(6, "Adam first step", rel <= 1e-6, f"step {step:.10f} vs alpha {alpha} (relative {rel:.1e})", t0)


# -- 7 ------------------------------------------------------------------------------


def test_07_loss_anchors(report):
    t0 = time.time()
    n, c = 10, 5
    Y = one_hot(np.arange(n) % c, c)
    a = loss(Y, Y)
    b = loss(np.full((n, c), 1 / c), Y) - n * np.log(c)
    Yb = (np.random.default_rng(7).random((n, c)) < 0.5) * 1.0
    d = loss(np.full((n, c), 0.5), Yb, "multilabel") - n * c * np.log(2)
    ok = abs(a) <= 1e-9 and abs(b) <= 1e-9 and abs(d) <= 1e-9
    report(7, "loss anchors", ok, f"C_cat(y,y)={a:.1e}, uniform gap {b:.1e}, binary gap {d:.1e}", t0)


# -- 8 ------------------------------------------------------------------------------

SYNTH_CHANNELS = (ChannelSpec("A", 12), ChannelSpec("B", 12), ChannelSpec("C", 12))


def _suite_config(**net):
    return PipelineConfig(
        channels=SYNTH_CHANNELS,
        gmm=FitConfig(K=8, em_iters=10, sample_size=20_000),
        reduction_r=16,
        net=NetConfig(depth=2, width=512, batch_size=128, epochs=30, **net),
        bag_count=8,
    )


def _run(spec, cfg, seed, n_test=None):
    train = synth_generate(spec, 100 + seed)
    test = synth_generate(replace(spec, videos_per_class=n_test or spec.videos_per_class), 200 + seed)
    unsup = pipeline.fit_unsupervised(train, cfg.with_seed(seed))
    return unsup, pipeline.encode(unsup, train), pipeline.encode(unsup, test)


def test_08_end_to_end(report):
    t0 = time.time()
    cfg = _suite_config()
    spec = SynthSpec(n_classes=5, videos_per_class=50, records_per_video=200,
                     channels=SYNTH_CHANNELS, separation=1.5, geometry_seed=7)
    unsup, tr, te = _run(spec, cfg, seed=0)
    acc = pipeline.accuracy(pipeline.train_classifier(unsup, tr, cfg), te)

    xor = SynthSpec(n_classes=2, videos_per_class=50, records_per_video=200,
                    channels=SYNTH_CHANNELS, separation=3.0, layout="xor", geometry_seed=7)
    net_accs, svm_accs = [], []
    for seed in range(5):
        unsup_x, tr_x, te_x = _run(xor, cfg, seed)
        net_accs.append(pipeline.accuracy(pipeline.train_classifier(unsup_x, tr_x, cfg.with_seed(seed)), te_x))
        svm = pipeline.train_classifier(unsup_x, tr_x, replace(cfg, classifier="svm"))
        svm_accs.append(pipeline.accuracy(svm, te_x))
    ok = acc >= 0.99 and np.median(net_accs) > np.median(svm_accs)
    report(8, "end-to-end synthetic", ok,
           f"separable held-out accuracy {acc:.3f} (need >= 0.99); XOR median net "
           f"{np.median(net_accs):.3f} vs SVM {np.median(svm_accs):.3f}", t0)


# -- 9 and 10 share a harder, non-saturated task -------------------------------------------

HARD = SynthSpec(n_classes=5, videos_per_class=50, records_per_video=200, channels=SYNTH_CHANNELS,
                 separation=0.8, n_codewords=8, geometry_seed=7)


def _hard_config():
    return replace(_suite_config(dropout=0.5), reduction_r=32)


def test_09_bagging_trend(report):
    t0 = time.time()
    cfg = _hard_config()
    vs_best, vs_mean = [], []
    for trial in range(5):
        unsup, tr, te = _run(HARD, cfg, trial, n_test=100)
        bagged = pipeline.bag(unsup, tr, cfg.with_seed(10 * trial))
        members = [pipeline.accuracy(m, te) for m in bagged.classifier.members]
        ens = pipeline.accuracy(bagged, te)
        vs_best.append(ens - max(members))
        vs_mean.append(ens - np.mean(members))
    ok = np.median(vs_best) >= -0.01 and np.median(vs_mean) >= 0
    report(9, "bagging trend", ok,
           f"median ensemble - best member {100 * np.median(vs_best):+.2f} pts (need >= -1), "
           f"ensemble - member mean {100 * np.median(vs_mean):+.2f} pts (need >= 0)", t0)


def test_10_transfer(report, tmp_path):
    t0 = time.time()
    cfg = _hard_config()
    # no-op transfer against from-scratch training, single-threaded
    with threadpool_limits(1):
        source, _, _ = _run(HARD, cfg, 0)
        target = synth_generate(HARD, 300)
        moved, moved_reps = pipeline.transfer(source, target, (), cfg)
        scratch_unsup = pipeline.fit_unsupervised(target, cfg)
        scratch_reps = pipeline.encode(scratch_unsup, target)
        scratch = pipeline.train_classifier(scratch_unsup, scratch_reps, cfg)
    save_container(moved, tmp_path / "moved.fvc")
    save_container(scratch, tmp_path / "scratch.fvc")
    X, _ = pipeline.stack_reps(scratch_reps)
    identical = (
        (tmp_path / "moved.fvc").read_bytes() == (tmp_path / "scratch.fvc").read_bytes()
        and predict(moved.classifier, X).tobytes() == predict(scratch.classifier, X).tobytes()
    )

    gaps = []
    for seed in range(5):
        source, _, _ = _run(HARD, cfg, seed)
        target = synth_generate(HARD, 300 + seed)
        test = synth_generate(replace(HARD, videos_per_class=100), 400 + seed)
        cfg_s = cfg.with_seed(seed)
        own, _ = pipeline.transfer(source, target, (), cfg_s)
        shared, _ = pipeline.transfer(source, target, {"gmm"}, cfg_s)
        a = pipeline.accuracy(own, pipeline.encode(own, test))
        b = pipeline.accuracy(shared, pipeline.encode(shared, test))
        gaps.append(abs(a - b))
    ok = identical and np.median(gaps) < 0.02
    report(10, "transfer identity and similarity", ok,
           f"no-op transfer bit-identical: {identical}; median |own - transferred GMM| "
           f"{100 * np.median(gaps):.2f} pts (need < 2)", t0)


# -- 11 -----------------------------------------------------------------------------


def test_11_normalization_algebra(report):
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        fvs = []
        for c in range(int(rng.integers(1, 6))):
            K, D = int(rng.integers(1, 5)), int(rng.integers(1, 6))
            v = rng.standard_normal(2 * K * D) * 10.0 ** rng.uniform(-3, 3)
            fvs.append(FisherVector(f"c{c}", v, K, D))
        double = finalize_video(fvs).vector
        once = np.concatenate([f.values / np.abs(f.values).sum() for f in fvs])
        quarter = np.sign(once) * np.abs(once) ** 0.25
        worst = max(worst, float(np.max(np.abs(double - quarter / np.linalg.norm(quarter)))))
    report(11, "normalization algebra", worst <= 1e-12, f"max elementwise gap {worst:.2e} (tol 1e-12)", t0)


# -- 12 -----------------------------------------------------------------------------


def test_12_dafs_pooling_commutativity(report):
    t0 = time.time()
    channels = (ChannelSpec("A", 10), ChannelSpec("B", 6))
    spec = SynthSpec(n_classes=2, videos_per_class=3, records_per_video=120, channels=channels)
    videos = synth_generate(spec, 12)
    cfg = PipelineConfig(channels=channels, gmm=FitConfig(K=6, em_iters=5, sample_size=500))
    unsup = pipeline.fit_unsupervised(videos, cfg)
    worst = 0.0
    for v in videos:
        variants = make_variants(v)
        for a, b in itertools.combinations(variants, 2):
            joint = pipeline.pooled_channel_fvs(unsup, dafs_stack([a, b]))
            left = pipeline.pooled_channel_fvs(unsup, a[1])
            right = pipeline.pooled_channel_fvs(unsup, b[1])
            for j, l, r in zip(joint, left, right):
                s = l.values + r.values
                worst = max(worst, float(np.max(np.abs(j.values - s)) / np.max(np.abs(s))))
    report(12, "DAFS pooling commutativity", worst <= 1e-10,
           f"max relative gap {worst:.2e} over {len(videos) * 15} variant pairs (tol 1e-10)", t0)
