import numpy as np
import pytest

from darkforge import autodiff as ad
from darkforge.autodiff import Tensor
from darkforge.models import ModelConfig, ModelParams, build_params
from darkforge.raw import pack_raw, unpack_raw
from darkforge.train import (
    AdamState,
    TrainConfig,
    TrainSample,
    adam_step,
    crop_pair,
    init_adam,
    l1_loss,
    l2_loss,
    train,
)

RNG = np.random.default_rng(2024)


class TestLosses:
    def test_l1_identical_is_zero(self):
        x = Tensor(RNG.uniform(0, 1, (3, 4)))
        assert float(l1_loss(x, Tensor(x.data.copy())).data) == 0.0

    def test_l1_hand_value(self):
        assert float(l1_loss(Tensor([0.0, 1.0]), Tensor([1.0, 1.0])).data) == 0.5

    def test_l1_gradient_sign(self):
        pred = Tensor([0.0, 2.0, 1.0], requires_grad=True)
        l1_loss(pred, Tensor([1.0, 1.0, 1.0])).backward()
        assert np.allclose(pred.grad, [-1 / 3, 1 / 3, 0.0])

    def test_l2_identical_is_zero(self):
        x = Tensor(RNG.uniform(0, 1, 7))
        assert float(l2_loss(x, Tensor(x.data.copy())).data) == 0.0

    def test_l2_hand_value(self):
        assert float(l2_loss(Tensor([0.0, 2.0]), Tensor([0.0, 0.0])).data) == 2.0

    def test_l2_gradient(self):
        pred = Tensor([3.0, 1.0], requires_grad=True)
        l2_loss(pred, Tensor([1.0, 1.0])).backward()
        assert np.allclose(pred.grad, [2.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(Exception):
            l1_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


def single_param(value=0.0):
    return ModelParams({"w": Tensor(np.array([value]), requires_grad=True)})


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = single_param(0.7)
        params["w"].grad = np.zeros(1)
        state = init_adam(params)
        adam_step(params, state, lr=1e-2)
        assert params["w"].data[0] == 0.7
        assert state.t == 1

    def test_first_step_magnitude(self):
        params = single_param(0.0)
        params["w"].grad = np.ones(1)
        state = init_adam(params)
        adam_step(params, state, lr=1e-4)
        # bias-corrected first step is -lr within eps rounding
        assert abs(params["w"].data[0] + 1e-4) < 1e-7

    def test_missing_grad_rejected(self):
        params = single_param()
        with pytest.raises(RuntimeError, match="no gradient"):
            adam_step(params, init_adam(params), lr=1e-3)

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(5)
            params = ModelParams(
                {"w": Tensor(np.zeros(8), requires_grad=True)}
            )
            state = init_adam(params)
            target = Tensor(rng.uniform(0, 1, 8))
            for _ in range(30):
                params.zero_grads()
                l2_loss(params["w"], target).backward()
                adam_step(params, state, lr=1e-2)
            return params["w"].data.copy()

        assert np.array_equal(run(), run())

    def test_decoupled_state_per_parameter(self):
        params = ModelParams(
            {
                "a": Tensor(np.zeros(2), requires_grad=True),
                "b": Tensor(np.zeros(3), requires_grad=True),
            }
        )
        state = init_adam(params)
        params["a"].grad = np.ones(2)
        params["b"].grad = np.zeros(3)
        adam_step(params, state, lr=1e-2)
        assert np.all(params["a"].data != 0.0)
        assert np.all(params["b"].data == 0.0)


def make_sample(h=32, w=32, seed=0, ratio=2.0):
    rng = np.random.default_rng(seed)
    rgb = rng.uniform(0.1, 0.9, (h, w, 3))
    return TrainSample(
        plane=rng.uniform(0, 0.5, (h, w)),
        mono=rgb.mean(axis=2),
        rgb=rgb,
        ratio=ratio,
    )


class TestCropPair:
    def test_origins_always_even(self):
        sample = make_sample(64, 48)
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            crop = crop_pair(sample, 16, rng)
            # locate the window by matching the first row of the mono plane
            assert crop.plane.shape == (16, 16)
        # constructive check: origins are generated as 2*k by construction;
        # verify the phase survived by comparing against the packed parent
        rng = np.random.default_rng(1)
        full_packed = pack_raw(sample.plane, "RGGB").planes
        for _ in range(200):
            crop = crop_pair(sample, 16, rng)
            window = pack_raw(crop.plane, "RGGB").planes
            found = False
            for oy in range(0, 64 - 16 + 1, 2):
                for ox in range(0, 48 - 16 + 1, 2):
                    if np.array_equal(
                        window, full_packed[:, oy // 2 : oy // 2 + 8, ox // 2 : ox // 2 + 8]
                    ):
                        found = True
                        break
                if found:
                    break
            assert found, "crop window is not on an even origin of the parent mosaic"

    def test_full_frame_is_identity(self):
        sample = make_sample(32, 32)
        crop = crop_pair(sample, 32, np.random.default_rng(0))
        assert np.array_equal(crop.plane, sample.plane)
        assert np.array_equal(crop.rgb, sample.rgb)

    def test_crop_larger_than_frame_rejected(self):
        with pytest.raises(ValueError):
            crop_pair(make_sample(16, 16), 32, np.random.default_rng(0))

    def test_packed_window_arithmetic(self):
        # packed crop of origin (2y, 2x) equals the packed-plane window at (y, x)
        sample = make_sample(64, 64, seed=3)
        full_packed = pack_raw(sample.plane, "RGGB").planes
        rng = np.random.default_rng(7)
        crop = crop_pair(sample, 32, rng)
        window = pack_raw(crop.plane, "RGGB").planes
        matches = [
            (oy, ox)
            for oy in range(0, 17)
            for ox in range(0, 17)
            if np.array_equal(window, full_packed[:, oy : oy + 16, ox : ox + 16])
        ]
        assert matches, "packed crop must be a half-origin window of the packed parent"

    def test_phase_preservation_roundtrip(self):
        sample = make_sample(32, 32, seed=9)
        crop = crop_pair(sample, 16, np.random.default_rng(2))
        packed = pack_raw(crop.plane, "RGGB")
        assert np.array_equal(unpack_raw(packed, "RGGB"), crop.plane)


TOY = ModelConfig(base_channels=4, depth=2)


class TestTrainLoop:
    def test_loss_trends_down(self):
        sample = make_sample(16, 16, seed=1)
        config = TrainConfig(steps=40, crop=16, seed=0, lr_initial=1e-3)
        result = train([sample], TOY, config)
        first = np.mean([row[4] for row in result.curve[:5]])
        last = np.mean([row[4] for row in result.curve[-5:]])
        assert last < first

    def test_seed_determinism(self):
        sample = make_sample(16, 16, seed=1)
        config = TrainConfig(steps=8, crop=16, seed=12)
        a = train([sample], TOY, config).curve
        b = train([sample], TOY, config).curve
        assert a == b

    def test_wo_dbf_drops_mono_term(self):
        sample = make_sample(16, 16, seed=2)
        config = TrainConfig(steps=4, crop=16, seed=0)
        result = train([sample], ModelConfig(base_channels=4, depth=2, use_dbf=False), config)
        assert all(row[2] == 0.0 for row in result.curve)
        assert all(row[4] == row[3] for row in result.curve)

    def test_l2_config_step0_loss_is_mse(self):
        sample = make_sample(16, 16, seed=3)
        l2_cfg = ModelConfig(base_channels=4, depth=2, loss="l2")
        result = train([sample], l2_cfg, TrainConfig(steps=1, crop=16, seed=6))
        params = build_params(l2_cfg, seed=6)
        from darkforge.models import forward_joint
        from darkforge.train import _batch_inputs

        rng = np.random.default_rng(6)
        picked = [[sample][int(rng.integers(0, 1))]]
        crops = [crop_pair(s, 16, rng) for s in picked]
        color_t, proxy_t, mono_gt, rgb_gt = _batch_inputs(crops, l2_cfg)
        mono_out, rgb_out = forward_joint(color_t, proxy_t, params, l2_cfg, train=True)
        expected_mono = float(np.mean((mono_out.data - mono_gt.data) ** 2))
        expected_rgb = float(np.mean((rgb_out.data - rgb_gt.data) ** 2))
        assert abs(result.curve[0][2] - expected_mono) < 1e-12
        assert abs(result.curve[0][3] - expected_rgb) < 1e-12

    def test_lr_switch(self):
        sample = make_sample(16, 16)
        config = TrainConfig(steps=10, crop=16, seed=0, lr_switch_step=6)
        result = train([sample], TOY, config)
        assert all(row[1] == config.lr_initial for row in result.curve[:6])
        assert all(row[1] == config.lr_after_converge for row in result.curve[6:])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train([], TOY, TrainConfig(steps=1, crop=16))

    def test_nan_loss_aborts_with_step(self):
        sample = make_sample(16, 16, seed=4)
        sample.rgb[3, 3, 0] = np.nan
        ad.strict_checks = False  # exercise the train-loop diagnostic itself
        with pytest.raises(RuntimeError, match="step 0"):
            train([sample], TOY, TrainConfig(steps=2, crop=16, seed=0))

    def test_checkpoint_and_curve_written(self, tmp_path):
        sample = make_sample(16, 16, seed=5)
        result = train([sample], TOY, TrainConfig(steps=5, crop=16, seed=0), out_dir=tmp_path)
        assert result.checkpoint_path.exists()
        curve = (tmp_path / "loss_curve.csv").read_text().splitlines()
        assert curve[0] == "step,lr,loss_mono,loss_rgb,loss_total"
        assert len(curve) == 6

    def test_batch_dimension(self):
        sample = make_sample(32, 32, seed=6)
        config = TrainConfig(steps=2, crop=16, batch=3, seed=0)
        result = train([sample], TOY, config)
        assert len(result.curve) == 2

    def test_odd_crop_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=1, crop=15)
