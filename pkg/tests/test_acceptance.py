"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The end-to-end learning criterion trains a reduced network and is the
long pole (tens of minutes on a small host); everything else finishes in a
few minutes.
"""

import os
import time

import numpy as np
import pytest

from floodfill.collectives import fold_average_reference, ring_allreduce
from floodfill.data import extract_examples, gen_synthetic
from floodfill.inference import FfnPredictor, find_seeds, segment_volume
from floodfill.metrics import (
    evaluate_segmentation,
    rand_counts_bruteforce,
    rand_counts_fast,
    rand_scores,
)
from floodfill.model import (
    FfnConfig,
    FfnParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    logit,
)
from floodfill.optim import LrPolicy, effective_lr
from floodfill.tensor_ops import (
    ConvKernel,
    conv3d_backward,
    conv3d_forward,
    finite_difference_check,
    sigmoid_ce_loss,
)
from floodfill.trainer import (
    Replica,
    TrainItem,
    TrainSettings,
    bench_scaling,
    run_training,
    smoothed_series,
    sync_sgd_step,
)
from floodfill.transport import make_inproc_ring

from helpers import rel_err, run_ring

MICRO = FfnConfig(num_modules=2, features=4, fov_size=9, delta=2)

# end-to-end configuration pinned by one calibration run (see decision ledger)
REDUCED = FfnConfig(num_modules=4, features=8, fov_size=17, delta=4)
E2E_STEPS = 3000  # hard budget from the criterion
E2E_WORKERS = 2
E2E_BATCH_PER_WORKER = 4
E2E_SEED = 0


def report(n, text):
    print(f"\nACCEPTANCE {n}: PASS - {text}")


def micro_train_set(seed=7):
    vol, labels = gen_synthetic(24, 4, 5.0, seed)
    return extract_examples(vol, labels, MICRO.train_subvol_size)


def make_items(seed, count, cfg=MICRO):
    rng = np.random.default_rng(seed)
    f = cfg.fov_size
    items = []
    for _ in range(count):
        pom = np.full((f, f, f), logit(0.05), dtype=np.float32)
        pom[f // 2, f // 2, f // 2] = logit(0.95)
        items.append(
            TrainItem(
                image=rng.uniform(-0.5, 0.5, size=(f, f, f)).astype(np.float32),
                pom=pom,
                labels=np.where(rng.random((f, f, f)) > 0.5, 0.95, 0.05).astype(
                    np.float32
                ),
            )
        )
    return items


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst_primitive = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 3, 3))
        k = ConvKernel(rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2))
        proj = rng.normal(size=(2, 3, 3, 3))

        def f_in(flat):
            xx = flat.reshape(x.shape)
            out = conv3d_forward(xx, k)
            gx, _ = conv3d_backward(xx, k, proj)
            return float((out * proj).sum()), gx.ravel()

        def f_k(flat):
            kk = ConvKernel(flat[:-2].reshape(k.weights.shape), flat[-2:])
            out = conv3d_forward(x, kk)
            _, gk = conv3d_backward(x, kk, proj)
            return float((out * proj).sum()), np.concatenate(
                [gk.weights.ravel(), gk.bias]
            )

        # conv is linear, so central differences are exact up to roundoff and
        # a larger epsilon only reduces the roundoff term
        idx = rng.choice(x.size, size=6, replace=False)
        worst_primitive = max(
            worst_primitive, finite_difference_check(f_in, x.ravel(), 1e-3, idx)
        )
        flat = np.concatenate([k.weights.ravel(), k.bias])
        idx = rng.choice(flat.size, size=6, replace=False)
        worst_primitive = max(
            worst_primitive, finite_difference_check(f_k, flat, 1e-3, idx)
        )

        # random 2^3 logits; keep labels away from sigma(logit) so no
        # coordinate has a vanishing gradient (relative error is
        # ill-conditioned at zero)
        x_ce = rng.normal(size=8)
        y = rng.uniform(0, 1, size=8)
        from scipy.special import expit

        near = np.abs(expit(x_ce) - y) < 1e-2
        y[near] = np.clip(expit(x_ce[near]) + 0.1, 0.0, 1.0)
        worst_primitive = max(
            worst_primitive,
            finite_difference_check(lambda v: sigmoid_ce_loss(v, y), x_ce, 1e-5),
        )
    assert worst_primitive <= 1e-7

    # full FFN loss, double precision, 10 sampled weights per seed; sampling
    # is restricted to weights whose gradient is numerically resolvable
    # (relative error at a zero gradient is pure roundoff noise)
    cfg = FfnConfig(num_modules=2, features=4, fov_size=9, delta=2, dtype="float64")
    worst_model = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        params = init_params(cfg, seed)
        img = rng.uniform(-0.5, 0.5, size=(9, 9, 9))
        pom = np.full((9, 9, 9), logit(0.05))
        pom[4, 4, 4] = logit(0.95)
        labels = rng.uniform(0.05, 0.95, size=(1, 9, 9, 9))
        flat0 = params.flatten()

        def f(flat):
            p = FfnParams.from_flat(cfg, flat)
            lg, cache = forward(p, img, pom)
            loss, gl = sigmoid_ce_loss(lg, labels)
            return loss, backward(p, cache, gl).flatten()

        _, g0 = f(flat0)
        alive = np.flatnonzero(np.abs(g0) > 1e-5 * np.abs(g0).max())
        idx = rng.choice(alive, size=10, replace=False)
        # eps=1e-6: small enough that the difference interval almost never
        # straddles a ReLU kink, still far above double-precision roundoff
        worst_model = max(worst_model, finite_difference_check(f, flat0, 1e-6, idx))
    assert worst_model <= 1e-4
    dt = time.perf_counter() - t0
    assert dt < 120
    report(1, f"primitive FD err {worst_primitive:.2e} <= 1e-7, "
              f"full-model {worst_model:.2e} <= 1e-4, {dt:.0f}s")


def test_criterion_2_metric_oracle_equivalence():
    t0 = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        edge = int(rng.integers(4, 13))
        pred = rng.integers(0, 6, size=(edge,) * 3).astype(np.uint32)
        truth = rng.integers(0, 6, size=(edge,) * 3).astype(np.uint32)
        a = rand_counts_bruteforce(pred, truth)
        b = rand_counts_fast(pred, truth)
        assert (a.tp, a.fp, a.tn, a.fn) == (b.tp, b.fp, b.tn, b.fn)

    s = np.array([1, 1, 2, 2], dtype=np.uint32).reshape(1, 1, 4)
    g = np.array([1, 1, 1, 2], dtype=np.uint32).reshape(1, 1, 4)
    counts = rand_counts_fast(s, g, include_background=True)
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (1, 1, 2, 2)
    assert rand_scores(counts).are == pytest.approx(0.6)

    rng = np.random.default_rng(99)
    same = rng.integers(1, 7, size=(10, 10, 10)).astype(np.uint32)
    scores = evaluate_segmentation(same, same)
    assert scores.are == 0.0 and scores.voi == 0.0
    dt = time.perf_counter() - t0
    assert dt < 60
    report(2, f"fast==bruteforce on 20 volumes, fixture ARE=0.6, identity=0, {dt:.0f}s")


@pytest.mark.parametrize("p", [2, 4])
def test_criterion_3_sync_sgd_equivalence(p):
    t0 = time.perf_counter()
    b = 2
    steps = 50
    stream = [make_items(1000 + s, p * b) for s in range(steps)]

    def worker(group, rank):
        replica = Replica.fresh(MICRO, LrPolicy(base_lr=1e-3), seed=3)
        for s in range(steps):
            sync_sgd_step(group, replica, stream[s][rank * b : (rank + 1) * b])
        return replica.params.flatten()

    multi = run_ring(p, worker)
    single = Replica.fresh(MICRO, LrPolicy(base_lr=1e-3), seed=3)
    group1 = make_inproc_ring(1)[0]
    for s in range(steps):
        sync_sgd_step(group1, single, stream[s])
    err = rel_err(multi[0], single.params.flatten())
    assert err <= 1e-6
    dt = time.perf_counter() - t0
    assert dt < 300
    report(3, f"p={p} x b={b} vs 1 x {p * b}: rel err {err:.2e} <= 1e-6 "
              f"after {steps} steps, {dt:.0f}s")


def test_criterion_4_replica_consistency(tmp_path):
    t0 = time.perf_counter()
    result = run_training(
        MICRO,
        LrPolicy(base_lr=1.2e-3),
        micro_train_set(),
        TrainSettings(
            workers=4,
            batch_per_worker=1,
            steps=100,
            seed=11,
            debug_replica_check=True,  # raises on any checksum divergence
            out_dir=str(tmp_path),
        ),
    )
    assert len(result.stats) == 100
    dt = time.perf_counter() - t0
    assert dt < 300
    report(4, f"100-step p=4 run, bitwise-identical replica checksums every step, {dt:.0f}s")


def test_criterion_5_ring_allreduce_contract():
    t0 = time.perf_counter()
    for p in (2, 3, 4, 8):
        for n in (1, 10, 1024, 1000):
            rng = np.random.default_rng(p * 10000 + n)
            vecs = [rng.normal(size=n).astype(np.float32) for _ in range(p)]
            groups = make_inproc_ring(p)
            results = [None] * p
            import threading

            def work(rank):
                results[rank] = ring_allreduce(groups[rank], vecs[rank])

            threads = [threading.Thread(target=work, args=(r,)) for r in range(p)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            ref = fold_average_reference(vecs)
            for out in results:
                assert np.array_equal(out, ref)
            expect_bytes = 2 * (p - 1) * (-(-n // p)) * 4
            for g in groups:
                assert g.data_bytes_sent() == expect_bytes
    dt = time.perf_counter() - t0
    assert dt < 60
    report(5, f"bit-equal to the fixed-order fold and exact 2(p-1)ceil(n/p) "
              f"elements for p in (2,3,4,8), {dt:.0f}s")


def test_criterion_6_desk_scale_scaling():
    t0 = time.perf_counter()
    cores = os.cpu_count() or 1
    p_list = [p for p in (1, 2, 4, 8) if p <= max(cores, 2)]
    rows = bench_scaling(
        MICRO,
        LrPolicy(base_lr=1.2e-3),
        micro_train_set(),
        p_list,
        batch_per_worker=2,
        steps=12,
        warmup_steps=2,
        seed=0,
    )
    assert rows[0].p == 1 and rows[0].efficiency == 1.0
    for a, b in zip(rows, rows[1:]):
        assert b.efficiency <= a.efficiency + 0.05  # monotone within slack
    dt = time.perf_counter() - t0
    assert dt < 600
    summary = ", ".join(f"p={r.p}: {r.fovs_per_s:.1f} FOVs/s eff={r.efficiency:.2f}"
                        for r in rows)
    if cores < 8:
        report(6, f"{summary}; monotone within 0.05 ({dt:.0f}s)")
        pytest.skip(
            f"host has {cores} cores; the p=8 >= 4x p=1 clause needs an "
            f">= 8-core host and cannot be exercised here"
        )
    eight = next(r for r in rows if r.p == 8)
    assert eight.efficiency >= 0.5  # throughput(8) >= 4x throughput(1)
    report(6, f"{summary}; p=8 reached {eight.efficiency:.2f} efficiency ({dt:.0f}s)")


@pytest.mark.slow
def test_criterion_7_end_to_end_learning(tmp_path):
    t0 = time.perf_counter()
    vol, labels = gen_synthetic(64, 8, 10.0, 42)
    train_set = extract_examples(vol, labels, REDUCED.train_subvol_size)
    result = run_training(
        REDUCED,
        LrPolicy(base_lr=1.2e-3),
        train_set,
        TrainSettings(
            workers=E2E_WORKERS,
            batch_per_worker=E2E_BATCH_PER_WORKER,
            steps=E2E_STEPS,
            seed=E2E_SEED,
            out_dir=str(tmp_path),
        ),
    )
    smoothed_f1 = smoothed_series([r.f1 for r in result.stats], 0.9)
    hit = next((i for i, v in enumerate(smoothed_f1) if v >= 0.85), None)
    assert hit is not None, "smoothed voxelwise F1 never reached 0.85"
    assert hit < E2E_STEPS

    holdout_vol, holdout_labels = gen_synthetic(64, 8, 10.0, 1043)
    params, step, _ = load_checkpoint(result.checkpoints[-1])
    seeds = find_seeds(holdout_vol, min_spacing=float(REDUCED.delta))
    seg = segment_volume(
        FfnPredictor(REDUCED, params),
        holdout_vol,
        seeds,
        fov_size=REDUCED.fov_size,
        delta=REDUCED.delta,
    )
    scores = evaluate_segmentation(seg, holdout_labels)
    dt = time.perf_counter() - t0
    assert scores.are <= 0.1, f"held-out ARE {scores.are:.4f} > 0.1"
    report(
        7,
        f"smoothed F1 hit 0.85 at step {hit} (budget {E2E_STEPS}); held-out "
        f"ARE {scores.are:.4f} <= 0.1, VOI {scores.voi:.3f}, {dt / 60:.1f} min",
    )


def test_criterion_8_lr_policy_plumbing(tmp_path):
    for k in (1, 2, 4, 16, 64):
        linear = LrPolicy(base_lr=1e-3, mode="linear", batch_scale_k=k)
        root = LrPolicy(base_lr=1e-3, mode="sqrt", batch_scale_k=k)
        assert effective_lr(linear, 10) == 1e-3 * k
        assert effective_lr(root, 10) == 1e-3 * np.sqrt(k)

    # sweep CSV normalization via the CLI path on a tiny grid
    from floodfill.cli import main
    from floodfill.data import save_volume

    vol, labels = gen_synthetic(24, 4, 5.0, 7)
    save_volume(tmp_path / "image.ffnv", vol)
    save_volume(tmp_path / "labels.ffnv", labels)
    out = tmp_path / "sweep"
    code = main([
        "sweep", "--image", str(tmp_path / "image.ffnv"),
        "--labels", str(tmp_path / "labels.ffnv"),
        "--out-dir", str(out),
        "--num-modules", "2", "--features", "4", "--fov-size", "9", "--delta", "2",
        "--batches", "1,2", "--lrs", "6e-4,1.2e-3", "--steps", "5",
        "--no-figures",
    ])
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "batch,lr,smoothed_acc,norm_acc"
    assert len(lines) == 5
    groups = {}
    for line in lines[1:]:
        batch, _, _, norm = line.split(",")
        groups.setdefault(batch, []).append(float(norm))
    for norms in groups.values():
        assert max(norms) == 1.0
    assert smoothed_series([1.0] * 8, 0.9) == pytest.approx([1.0] * 8)
    report(8, "linear x k and sqrt x sqrt(k) exact; per-batch sweep max normalized to 1.0")


def test_criterion_9_reproducibility(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run_training(
            MICRO,
            LrPolicy(base_lr=1.2e-3),
            micro_train_set(),
            TrainSettings(
                workers=2,
                batch_per_worker=2,
                steps=15,
                seed=21,
                checkpoint_every=5,
                out_dir=str(out),
            ),
        )
        outs.append(out)
    ck_a = sorted(p.name for p in outs[0].glob("*.ffnc"))
    ck_b = sorted(p.name for p in outs[1].glob("*.ffnc"))
    assert ck_a == ck_b
    for name in ck_a:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    # stats CSVs: identical except the wall-clock column, which cannot be
    # bit-reproducible (see the decision ledger)
    def rows_without_wall(path):
        return [",".join(line.split(",")[:-1]) for line in path.read_text().splitlines()]

    assert rows_without_wall(outs[0] / "stats.csv") == rows_without_wall(
        outs[1] / "stats.csv"
    )
    report(9, f"{len(ck_a)} checkpoints byte-identical; stats rows identical "
              "(wall-clock column excepted)")
