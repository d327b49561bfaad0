import os

import numpy as np
import pytest

from floodfill.model import (
    BadMagicError,
    CheckpointShapeError,
    FfnConfig,
    FfnParams,
    TruncatedCheckpointError,
    VersionMismatchError,
    apply_pom_update,
    backward,
    forward,
    init_params,
    load_checkpoint,
    logit,
    save_checkpoint,
)
from floodfill.optim import AdamState
from floodfill.tensor_ops import finite_difference_check, sigmoid_ce_loss

CFG = FfnConfig(num_modules=2, features=4, fov_size=9, delta=2, dtype="float64")


def fov_inputs(seed, cfg=CFG):
    rng = np.random.default_rng(seed)
    f = cfg.fov_size
    img = rng.uniform(-0.5, 0.5, size=(f, f, f))
    pom = np.full((f, f, f), logit(0.05))
    pom[f // 2, f // 2, f // 2] = logit(0.95)
    labels = rng.uniform(0.05, 0.95, size=(1, f, f, f))
    return img, pom, labels


class TestConfig:
    def test_subvolume_relation(self):
        assert FfnConfig().train_subvol_size == 49  # 33 + 2*8
        assert CFG.train_subvol_size == 13

    def test_validation(self):
        with pytest.raises(ValueError):
            FfnConfig(fov_size=10)
        with pytest.raises(ValueError):
            FfnConfig(num_modules=0)
        with pytest.raises(ValueError):
            FfnConfig(dtype="float16")


class TestInit:
    def test_same_seed_bit_identical(self):
        a = init_params(CFG, 3).flatten()
        b = init_params(CFG, 3).flatten()
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(
            init_params(CFG, 3).flatten(), init_params(CFG, 4).flatten()
        )

    def test_fan_in_scaling(self):
        cfg = FfnConfig(num_modules=4, features=16, fov_size=9, delta=2)
        params = init_params(cfg, 0)
        w = np.concatenate([k1.weights.ravel() for k1, _ in params.modules])
        assert w.size >= 10_000
        expected = np.sqrt(2.0 / (16 * 27))
        assert abs(w.std() - expected) / expected < 0.2

    def test_biases_zero(self):
        params = init_params(CFG, 1)
        assert not params.stage_in.bias.any()
        assert not params.stage_out.bias.any()


class TestForward:
    def test_zero_params_give_zero_logits(self):
        params = FfnParams.from_flat(CFG, np.zeros(init_params(CFG, 0).num_params))
        img, pom, _ = fov_inputs(0)
        logits, _ = forward(params, img, pom)
        assert not logits.any()

    def test_deterministic(self):
        params = init_params(CFG, 7)
        img, pom, _ = fov_inputs(1)
        a, _ = forward(params, img, pom)
        b, _ = forward(params, img, pom)
        assert np.array_equal(a, b)

    def test_output_shape_matches_fov(self):
        params = init_params(CFG, 7)
        img, pom, _ = fov_inputs(2)
        logits, _ = forward(params, img, pom)
        assert logits.shape == (1, 9, 9, 9)

    def test_pom_channel_is_live(self):
        params = init_params(CFG, 7)
        _, pom, _ = fov_inputs(3)
        img = np.zeros_like(pom)
        a, _ = forward(params, img, pom)
        b, _ = forward(params, img, 2.0 * pom)
        assert np.abs(a - b).max() > 0

    def test_shape_mismatch_raises(self):
        params = init_params(CFG, 7)
        img, pom, _ = fov_inputs(4)
        with pytest.raises(Exception, match="shape"):
            forward(params, img[:5], pom[:5])


class TestBackward:
    def test_zero_grad_logits(self):
        params = init_params(CFG, 7)
        img, pom, _ = fov_inputs(5)
        logits, cache = forward(params, img, pom)
        g = backward(params, cache, np.zeros_like(logits))
        assert not g.flatten().any()

    def test_missing_cache_rejected(self):
        params = init_params(CFG, 7)
        with pytest.raises(ValueError, match="cache"):
            backward(params, None, np.zeros((1, 9, 9, 9)))

    def test_full_model_finite_differences(self):
        params = init_params(CFG, 7)
        img, pom, labels = fov_inputs(6)
        flat0 = params.flatten()
        rng = np.random.default_rng(0)

        def f(flat):
            p = FfnParams.from_flat(CFG, flat)
            lg, cache = forward(p, img, pom)
            loss, gl = sigmoid_ce_loss(lg, labels)
            return loss, backward(p, cache, gl).flatten()

        idx = rng.choice(flat0.size, size=10, replace=False)
        assert finite_difference_check(f, flat0, 1e-6, idx) <= 1e-4

    def test_gradient_additive_over_examples(self):
        params = init_params(CFG, 7)
        img1, pom1, _ = fov_inputs(8)
        img2, pom2, _ = fov_inputs(9)
        imgs = np.stack([img1, img2])
        poms = np.stack([pom1, pom2])
        logits, cache = forward(params, imgs, poms)
        rng = np.random.default_rng(1)
        g = rng.normal(size=logits.shape)
        combined = backward(params, cache, g).flatten()
        total = np.zeros_like(combined)
        for i in range(2):
            lg, cache_i = forward(params, imgs[i], poms[i])
            total += backward(params, cache_i, g[i]).flatten()
        denom = max(np.abs(total).max(), 1e-12)
        assert np.abs(combined - total).max() / denom <= 1e-10


class TestPomUpdate:
    def test_idempotent_overwrite(self):
        pom = np.random.default_rng(0).normal(size=(13, 13, 13))
        window = pom[2:11, 2:11, 2:11].copy()
        out = apply_pom_update(pom, window, (2, 2, 2))
        assert np.array_equal(out, pom)

    def test_disjoint_updates_commute(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(20, 8, 8))
        a = rng.normal(size=(4, 4, 4))
        b = rng.normal(size=(4, 4, 4))
        p1 = base.copy()
        apply_pom_update(p1, a, (0, 0, 0))
        apply_pom_update(p1, b, (10, 0, 0))
        p2 = base.copy()
        apply_pom_update(p2, b, (10, 0, 0))
        apply_pom_update(p2, a, (0, 0, 0))
        assert np.array_equal(p1, p2)

    def test_center_probability_matches(self):
        pom = np.zeros((9, 9, 9))
        logits = np.full((5, 5, 5), 2.0)
        apply_pom_update(pom, logits, (2, 2, 2))
        sigma = 1 / (1 + np.exp(-pom[4, 4, 4]))
        assert sigma == pytest.approx(1 / (1 + np.exp(-2.0)))

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            apply_pom_update(np.zeros((5, 5, 5)), np.zeros((4, 4, 4)), (2, 2, 2))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        params = init_params(CFG, 9)
        adam = AdamState.zeros(params.num_params, dtype="float64")
        adam.m += 0.25
        adam.t = 12
        path = tmp_path / "a.ffnc"
        save_checkpoint(path, params, 321, adam)
        p2, step, a2 = load_checkpoint(path)
        assert step == 321
        assert np.array_equal(params.flatten(), p2.flatten())
        assert a2.t == 12 and np.array_equal(adam.m, a2.m) and np.array_equal(adam.v, a2.v)

    def test_roundtrip_without_adam(self, tmp_path):
        cfg32 = FfnConfig(num_modules=1, features=2, fov_size=5, delta=1)
        params = init_params(cfg32, 0)
        path = tmp_path / "b.ffnc"
        save_checkpoint(path, params, 0)
        p2, step, adam = load_checkpoint(path)
        assert adam is None and step == 0
        assert np.array_equal(params.flatten(), p2.flatten())
        assert p2.config == cfg32

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ffnc"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v.ffnc"
        save_checkpoint(path, init_params(CFG, 0), 0)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.ffnc"
        save_checkpoint(path, init_params(CFG, 0), 0)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(TruncatedCheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_config_mismatch_names_tensor(self, tmp_path):
        path = tmp_path / "m.ffnc"
        save_checkpoint(path, init_params(CFG, 0), 0)
        other = FfnConfig(num_modules=2, features=8, fov_size=9, delta=2)
        with pytest.raises(CheckpointShapeError, match="in.w"):
            load_checkpoint(path, expect_config=other)
