"""Tied-weight dense encoder-decoder: forward/backward, losses, the spatial
weight penalty, Adam, training, inference and checkpoints."""

import numpy as np
import pytest
from scipy import ndimage

from lareco import ded
from lareco.errors import GridMismatch, ShapeMismatch, EmptyDataset
from lareco.grid import GridSpec, OccupancyVolume

from conftest import gradient_errors


TOY_GRID = GridSpec.centered(4, 1.0)


def toy_model(hidden=(5,), seed=0):
    return ded.init_model(TOY_GRID, hidden, seed)


def toy_batch(rng, b=3):
    s = TOY_GRID.n_voxels
    X = (rng.random((b, s)) < 0.2).astype(float)
    Y = (rng.random((b, s)) < 0.4).astype(float)
    W = 1.0 + 10.0 * rng.random((b, s))
    return X, Y, W


def ball_pair(n=8, r=2.6):
    g = GridSpec.centered(n, 1.0)
    idx = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
    centers = g.world(idx.reshape(-1, 3))
    shape = OccupancyVolume(g, (np.linalg.norm(centers, axis=1) <= r).reshape(g.dims))
    path = OccupancyVolume(g, (np.abs(centers).max(axis=1) <= 1.1).reshape(g.dims))
    return g, path, shape


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

class TestForward:
    def test_zero_network_outputs_half(self):
        model = toy_model()
        for w in model.W:
            w[...] = 0.0
        X = np.zeros((2, TOY_GRID.n_voxels))
        z, _ = ded.forward(model, X, mode="infer")
        assert np.allclose(z, 0.5)

    def test_infer_deterministic(self, rng):
        model = toy_model()
        X = (rng.random((2, TOY_GRID.n_voxels)) < 0.3).astype(float)
        z1, _ = ded.forward(model, X, mode="infer")
        z2, _ = ded.forward(model, X, mode="infer")
        assert np.array_equal(z1, z2)

    def test_matches_hand_computed_composition(self, rng):
        g = GridSpec((2, 2, 2), 1.0)
        model = ded.init_model(g, (3,), seed=4)
        x = (rng.random((1, 8)) < 0.5).astype(float)
        z, _ = ded.forward(model, x, mode="infer")
        # independent recomputation from the definitions
        a1 = x @ model.W[0].T + model.b_enc[0]
        bn = model.bn[0]
        xhat = (a1 - bn.running_mean) / np.sqrt(bn.running_var + ded.BN_EPS)
        h = np.maximum(bn.gamma * xhat + bn.beta, 0.0)
        a2 = h @ model.W[0] + model.b_dec[0]
        expected = 1.0 / (1.0 + np.exp(-a2))
        assert np.allclose(z, expected, atol=1e-12)

    def test_output_in_open_unit_interval(self, rng):
        model = toy_model(hidden=(5, 4))
        X = (rng.random((3, TOY_GRID.n_voxels)) < 0.3).astype(float)
        z, _ = ded.forward(model, X, mode="infer")
        assert np.all(z > 0) and np.all(z < 1)

    def test_masking_requires_rng(self):
        model = toy_model()
        X = np.zeros((2, TOY_GRID.n_voxels))
        with pytest.raises(ValueError):
            ded.forward(model, X, mode="train", input_mask_prob=0.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            ded.forward(toy_model(), np.zeros((2, 7)))

    def test_train_mode_updates_running_stats(self, rng):
        model = toy_model()
        before = model.bn[0].running_mean.copy()
        X = rng.random((4, TOY_GRID.n_voxels))
        ded.forward(model, X, mode="train", rng=rng, input_mask_prob=0.0)
        assert not np.array_equal(model.bn[0].running_mean, before)


# ---------------------------------------------------------------------------
# wdice and loss
# ---------------------------------------------------------------------------

class TestWdice:
    def test_identical_is_one(self, rng):
        x = (rng.random(64) < 0.5).astype(float)
        w = 1.0 + rng.random(64)
        assert ded.wdice(x, x, w) == pytest.approx(1.0)

    def test_disjoint_is_zero(self):
        x = np.array([1.0, 1.0, 0.0, 0.0])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        assert ded.wdice(x, y, None) == 0.0

    def test_unit_weights_equal_unweighted(self, rng):
        z = rng.random(64)
        t = (rng.random(64) < 0.5).astype(float)
        assert abs(ded.wdice(z, t, np.ones(64)) - ded.wdice(z, t, None)) < 1e-15

    def test_weight_scale_invariance(self, rng):
        z = rng.random(64)
        t = (rng.random(64) < 0.5).astype(float)
        w = 1.0 + rng.random(64)
        assert np.isclose(ded.wdice(z, t, w), ded.wdice(z, t, 7.3 * w), rtol=1e-12)


class TestLoss:
    def test_ce_single_voxel_value(self):
        # -CE of (target=1, z=0.5) is -log 0.5
        model = toy_model()
        cfg = ded.LossConfig(ce_weight=1.0, dice_weight=0.0)
        s = TOY_GRID.n_voxels
        z = np.full((1, s), 0.5)
        t = np.zeros((1, s))
        t[0, 0] = 1.0
        z[0, 1:] = ded.CLAMP  # make the other voxels contribute ~0
        total, br = ded.loss(z, t, None, cfg, model)
        per_voxel = -np.log(0.5) - (s - 1) * np.log(1.0 - ded.CLAMP)
        assert np.isclose(total, per_voxel, rtol=1e-9)

    def test_dice_term_at_optimum(self, rng):
        model = toy_model()
        cfg = ded.LossConfig(ce_weight=0.0, dice_weight=1.0)
        t = (rng.random((1, TOY_GRID.n_voxels)) < 0.5).astype(float)
        total, br = ded.loss(t, t, None, cfg, model)
        assert np.isclose(total, -1.0)
        assert np.isclose(br["mean_wdice"], 1.0)

    def test_swr_term_added(self):
        model = toy_model()
        cfg = ded.LossConfig(lambda_swr=2.0)
        s = TOY_GRID.n_voxels
        z = np.full((1, s), 0.5)
        t = np.zeros((1, s))
        t0, _ = ded.loss(z, t, None, ded.LossConfig(), model)
        t1, _ = ded.loss(z, t, None, cfg, model)
        assert np.isclose(t1 - t0, 2.0 * ded.swr_penalty(model))

    def test_clamp_events_counted(self):
        model = toy_model()
        s = TOY_GRID.n_voxels
        z = np.full((1, s), 0.5)
        z[0, :3] = 1e-9
        _, br = ded.loss(z, np.zeros((1, s)), None, ded.LossConfig(), model)
        assert br["clamped"] == 3

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ded.LossConfig(ce_weight=0.5, dice_weight=0.6)


# ---------------------------------------------------------------------------
# swr penalty and gradient
# ---------------------------------------------------------------------------

class TestSwr:
    def test_constant_columns_zero(self):
        model = toy_model()
        for row in model.W[0]:
            row[...] = 3.7
        assert ded.swr_penalty(model) == 0.0

    def test_linear_ramp_along_one_axis(self):
        g = GridSpec((2, 2, 4), 1.0)
        model = ded.init_model(g, (1,), seed=0)
        col = np.zeros(g.dims)
        col[:, :, :] = np.arange(4)  # ramp 0..3 along z, constant in x and y
        model.W[0][0] = col.ravel()
        # 4 lines along z, each with 3 unit forward differences
        assert ded.swr_penalty(model) == pytest.approx(12.0)

    def test_invariant_to_hidden_unit_permutation(self, rng):
        model = toy_model(hidden=(6,))
        p0 = ded.swr_penalty(model)
        model.W[0][...] = model.W[0][rng.permutation(6)]
        assert np.isclose(ded.swr_penalty(model), p0)

    def test_neighbor_average_decreases_penalty(self):
        model = toy_model(hidden=(4,), seed=1)
        p0 = ded.swr_penalty(model)
        cols = model.W[0].reshape(-1, *TOY_GRID.dims).copy()
        kern = np.zeros((3, 3, 3))
        for off in ((0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)):
            kern[off] = 1.0
        cnt = ndimage.convolve(np.ones(TOY_GRID.dims), kern, mode="constant")
        for h in range(cols.shape[0]):
            cols[h] = ndimage.convolve(cols[h], kern, mode="constant") / cnt
        model.W[0][...] = cols.reshape(model.W[0].shape)
        assert ded.swr_penalty(model) < p0

    def test_gradient_matches_finite_differences(self):
        model = toy_model(hidden=(3,), seed=2)
        g = ded.swr_gradient(model)
        h = 1e-6
        flat = model.W[0].reshape(-1)
        gflat = g.reshape(-1)
        for i in range(0, flat.size, 17):
            orig = flat[i]
            flat[i] = orig + h
            hi = ded.swr_penalty(model)
            flat[i] = orig - h
            lo = ded.swr_penalty(model)
            flat[i] = orig
            assert np.isclose(gflat[i], (hi - lo) / (2 * h), rtol=1e-5, atol=1e-8)

    def test_lambda_scales_gradient_linearly(self, rng):
        model = toy_model()
        X, Y, W = (rng.random((2, TOY_GRID.n_voxels)) for _ in range(3))
        X, Y = (X < 0.3).astype(float), (Y < 0.5).astype(float)

        def grad_w0(lam):
            cfg = ded.LossConfig(lambda_swr=lam, input_mask_prob=0.0)
            r = np.random.default_rng(0)
            z, cache = ded.forward(model, X, mode="train", rng=r, input_mask_prob=0.0)
            return ded.backward(model, cache, z, Y, None, cfg)["W0"]

        g0, g1, g2 = grad_w0(0.0), grad_w0(1.0), grad_w0(2.0)
        assert np.allclose(g2 - g0, 2.0 * (g1 - g0), rtol=1e-9)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class TestBackward:
    def test_gradients_match_finite_differences(self, rng):
        model = toy_model(hidden=(5,), seed=3)
        X, Y, W = toy_batch(rng)
        cfg = ded.LossConfig(lambda_swr=0.01, input_mask_prob=0.2)
        errs = gradient_errors(model, X, Y, W, cfg, mask_seed=7)
        assert max(errs.values()) < 1e-4, errs

    def test_gradients_with_frozen_stats(self, rng):
        # batch of one: normalization uses the running statistics
        model = toy_model(hidden=(5,), seed=5)
        for bn in model.bn:
            bn.running_mean[...] = rng.standard_normal(bn.running_mean.shape)
            bn.running_var[...] = 0.5 + rng.random(bn.running_var.shape)
        X, Y, W = toy_batch(rng, b=1)
        cfg = ded.LossConfig(input_mask_prob=0.0)
        errs = gradient_errors(model, X, Y, W, cfg, mask_seed=1)
        assert max(errs.values()) < 1e-4, errs

    def test_infer_cache_rejected(self):
        model = toy_model()
        X = np.zeros((2, TOY_GRID.n_voxels))
        z, cache = ded.forward(model, X, mode="infer")
        with pytest.raises(ValueError):
            ded.backward(model, cache, z, X, None, ded.LossConfig())


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        model = toy_model()
        before = {k: v.copy() for k, v in model.params().items()}
        grads = {k: np.full_like(v, 2.0) for k, v in model.params().items()}
        state = ded.AdamState(lr=1e-3)
        ded.adam_step(model, grads, state)
        for k, v in model.params().items():
            step = before[k] - v
            assert np.allclose(step, 1e-3, rtol=1e-6)

    def test_zero_gradient_no_change(self):
        model = toy_model()
        before = {k: v.copy() for k, v in model.params().items()}
        grads = {k: np.zeros_like(v) for k, v in model.params().items()}
        state = ded.AdamState()
        ded.adam_step(model, grads, state)
        assert state.step == 1
        for k, v in model.params().items():
            assert np.array_equal(v, before[k])

    def test_two_steps_match_reference(self, rng):
        model = toy_model(hidden=(3,))
        g1 = {k: rng.standard_normal(v.shape) for k, v in model.params().items()}
        g2 = {k: rng.standard_normal(v.shape) for k, v in model.params().items()}
        start = {k: v.copy() for k, v in model.params().items()}
        state = ded.AdamState(lr=1e-2)
        ded.adam_step(model, g1, state)
        ded.adam_step(model, g2, state)

        # scalar reference implementation
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        for k, p0 in start.items():
            m = v = 0.0
            m = b1 * m + (1 - b1) * g1[k]
            v = b2 * v + (1 - b2) * g1[k] ** 2
            p1 = p0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
            m = b1 * m + (1 - b1) * g2[k]
            v = b2 * v + (1 - b2) * g2[k] ** 2
            p2 = p1 - lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
            assert np.allclose(model.params()[k], p2, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        model = toy_model()
        grads = {k: np.zeros(3) for k in model.params()}
        with pytest.raises(ShapeMismatch):
            ded.adam_step(model, grads, ded.AdamState())


# ---------------------------------------------------------------------------
# train / infer
# ---------------------------------------------------------------------------

class TestTrain:
    def test_zero_epochs_equals_init(self):
        g, path, shape = ball_pair()
        model, metrics = ded.train([(path, shape)], g, (8,), epochs=0, seed=3)
        ref = ded.init_model(g, (8,), seed=3)
        for k, v in model.params().items():
            assert np.array_equal(v, ref.params()[k])
        assert metrics == []

    def test_deterministic_given_seed(self):
        g, path, shape = ball_pair()
        cfg = ded.LossConfig()
        m1, _ = ded.train([(path, shape)] * 4, g, (8,), cfg, epochs=3, seed=5)
        m2, _ = ded.train([(path, shape)] * 4, g, (8,), cfg, epochs=3, seed=5)
        for k, v in m1.params().items():
            assert np.array_equal(v, m2.params()[k])

    def test_overfits_single_sample(self):
        g, path, shape = ball_pair()
        cfg = ded.LossConfig(lambda_swr=0.0, input_mask_prob=0.0)
        model, metrics = ded.train([(path, shape)], g, (16,), cfg,
                                   epochs=500, batch_size=1, seed=0)
        assert metrics[-1]["train_dice"] > 0.95

    def test_tied_weights_single_storage(self):
        g, path, shape = ball_pair()
        model, _ = ded.train([(path, shape)] * 2, g, (8, 4), epochs=2, seed=0)
        # one matrix per encoder layer; the decoder has no weight storage
        assert len(model.W) == 2
        assert not hasattr(model, "W_dec")

    def test_empty_dataset_rejected(self):
        with pytest.raises(EmptyDataset):
            ded.train([], TOY_GRID)

    def test_metrics_log_loss_terms(self):
        g, path, shape = ball_pair()
        _, metrics = ded.train([(path, shape)] * 2, g, (8,), epochs=2, seed=0)
        assert len(metrics) == 2
        for row in metrics:
            for key in ("epoch", "total", "ce", "wdice", "swr", "clamped", "train_dice"):
                assert key in row


class TestInfer:
    def test_probabilities_and_threshold(self):
        g, path, shape = ball_pair()
        model, _ = ded.train([(path, shape)] * 2, g, (8,), epochs=2, seed=0)
        prob, binary = ded.infer(model, path)
        assert np.all(prob.data > 0) and np.all(prob.data < 1)
        assert np.array_equal(binary.data, prob.data >= 0.5)
        # thresholding is idempotent
        rethresholded = (binary.data.astype(float) >= 0.5)
        assert np.array_equal(rethresholded, binary.data)

    def test_pure_function_of_inputs(self):
        g, path, shape = ball_pair()
        model, _ = ded.train([(path, shape)] * 2, g, (8,), epochs=2, seed=0)
        p1, b1 = ded.infer(model, path)
        p2, b2 = ded.infer(model, path)
        assert np.array_equal(p1.data, p2.data)

    def test_grid_mismatch_rejected(self):
        g, path, shape = ball_pair()
        model, _ = ded.train([(path, shape)], g, (8,), epochs=1, seed=0)
        other = OccupancyVolume(GridSpec.centered(8, 2.0), path.data)
        with pytest.raises(GridMismatch):
            ded.infer(model, other)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        g, path, shape = ball_pair()
        model, _ = ded.train([(path, shape)] * 2, g, (8, 4), epochs=2, seed=0)
        ded.save_checkpoint(tmp_path / "model", model, ded.LossConfig(), seed=0)
        back = ded.load_checkpoint(tmp_path / "model")
        assert back.grid == model.grid
        assert back.layer_sizes == model.layer_sizes
        for k, v in model.params().items():
            assert np.array_equal(back.params()[k],
                                  v.astype("<f4").astype(float))
        for i, bn in enumerate(model.bn):
            assert np.array_equal(back.bn[i].running_mean,
                                  bn.running_mean.astype("<f4").astype(float))

    def test_loaded_model_infers_identically(self, tmp_path):
        g, path, shape = ball_pair()
        model, _ = ded.train([(path, shape)] * 2, g, (8,), epochs=2, seed=0)
        ded.save_checkpoint(tmp_path / "m", model)
        back = ded.load_checkpoint(tmp_path / "m")
        # f32 rounding of the stored tensors: compare reconstructions
        _, b1 = ded.infer(back, path)
        ded.save_checkpoint(tmp_path / "m2", back)
        back2 = ded.load_checkpoint(tmp_path / "m2")
        _, b2 = ded.infer(back2, path)
        assert np.array_equal(b1.data, b2.data)
