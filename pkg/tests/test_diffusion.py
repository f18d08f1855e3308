import numpy as np
import pytest

from helpers import gradcheck
from radfp import diffusion
from radfp.dataset import SubjectRecord, VIEWS
from radfp.phantom import PhantomConfig, gen_cohort
from radfp.volume import BoxMask, Volume, central_mask

TINY = diffusion.DenoiserConfig(widths=(2, 3, 4))


def healthy_cohort(count=6, dims=(8, 8, 8), seed=3):
    cfg = PhantomConfig(dims=dims, grid_n=2, acl_prob=0.0, men_prob=0.0)
    return gen_cohort(seed, count, cfg)


class TestSchedule:
    def test_paper_endpoints(self):
        s = diffusion.make_schedule(1000, 1e-4, 2e-2)
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[-1] == pytest.approx(2e-2)

    def test_two_steps_exact(self):
        s = diffusion.make_schedule(2, 0.1, 0.3)
        assert list(s.betas) == [0.1, 0.3]

    def test_terminal_alpha_bar_small(self):
        s = diffusion.make_schedule(1000, 1e-4, 2e-2)
        assert s.alpha_bars[-1] < 1e-3
        assert np.sqrt(s.alpha_bars[-1]) < 0.04

    def test_monotonicity(self):
        for T, lo, hi in ((2, 0.01, 0.5), (50, 1e-4, 2e-2), (777, 1e-3, 0.1)):
            s = diffusion.make_schedule(T, lo, hi)
            assert (np.diff(s.betas) > 0).all()
            assert (np.diff(s.alpha_bars) < 0).all()
            assert 0 < s.alpha_bars[-1] < s.alpha_bars[0] < 1

    def test_preconditions(self):
        with pytest.raises(ValueError):
            diffusion.make_schedule(1, 1e-4, 2e-2)
        with pytest.raises(ValueError):
            diffusion.make_schedule(10, 0.2, 0.1)


class TestForwardDiffuse:
    def test_zero_noise(self):
        rng = np.random.default_rng(0)
        s = diffusion.make_schedule(10, 1e-4, 2e-2)
        x0 = Volume(rng.random((4, 4, 4)))
        zero = Volume(np.zeros((4, 4, 4)))
        out = diffusion.forward_diffuse(x0, 3, zero, s)
        assert np.allclose(out.data, np.sqrt(s.alpha_bars[3]) * x0.data, atol=1e-15)

    def test_t0_close_to_x0(self):
        rng = np.random.default_rng(1)
        s = diffusion.make_schedule(100, 1e-4, 2e-2)
        x0 = Volume(rng.random((4, 4, 4)))
        noise = Volume(rng.standard_normal((4, 4, 4)))
        out = diffusion.forward_diffuse(x0, 0, noise, s)
        bound = np.sqrt(1 - s.alpha_bars[0]) * np.abs(noise.data).max() \
            + (1 - np.sqrt(s.alpha_bars[0])) * np.abs(x0.data).max()
        assert np.abs(out.data - x0.data).max() <= bound + 1e-12

    def test_monte_carlo_variance(self):
        # sample variance of a noised voxel approximates 1 - alpha_bar_t
        rng = np.random.default_rng(2)
        s = diffusion.make_schedule(100, 1e-4, 2e-2)
        t = 60
        x0 = 0.37
        draws = np.sqrt(s.alpha_bars[t]) * x0 + np.sqrt(1 - s.alpha_bars[t]) \
            * rng.standard_normal(10_000)
        expected = 1 - s.alpha_bars[t]
        assert abs(draws.var() - expected) / expected < 0.05

    def test_shape_mismatch(self):
        s = diffusion.make_schedule(10, 1e-4, 2e-2)
        with pytest.raises(ValueError):
            diffusion.forward_diffuse(Volume(np.zeros((2, 2, 2))), 0,
                                      Volume(np.zeros((2, 2, 4))), s)
        with pytest.raises(ValueError):
            diffusion.forward_diffuse(Volume(np.zeros((2, 2, 2))), 10,
                                      Volume(np.zeros((2, 2, 2))), s)


class TestDenoiser:
    def test_output_shape_and_determinism(self):
        rng = np.random.default_rng(3)
        params = diffusion.init_denoiser_params(TINY, rng)
        x = Volume(rng.random((16, 32, 32)))
        ctx = Volume(rng.random((16, 32, 32)))
        mask = Volume(np.ones((16, 32, 32)))
        a = diffusion.denoiser_forward(params, TINY, x, ctx, mask, 5)
        b = diffusion.denoiser_forward(params, TINY, x, ctx, mask, 5)
        assert a.dims == (16, 32, 32)
        assert np.array_equal(a.data, b.data)

    def test_indivisible_dims_rejected(self):
        rng = np.random.default_rng(4)
        params = diffusion.init_denoiser_params(TINY, rng)
        bad = Volume(np.zeros((6, 8, 8)))
        with pytest.raises(ValueError, match="divisible by 4"):
            diffusion.denoiser_forward(params, TINY, bad, bad, bad, 0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        params = diffusion.init_denoiser_params(TINY, rng)
        dims = (4, 4, 8)
        x_t = rng.normal(size=(2,) + dims)
        ctx = rng.normal(size=(2,) + dims)
        mask = (rng.random((2,) + dims) > 0.5).astype(float)
        t = np.array([1, 7])
        eps = rng.normal(size=(2,) + dims)
        _, grads = diffusion.noise_loss_and_grads(params, TINY, x_t, ctx, mask, t, eps)

        def loss():
            pred = diffusion.denoiser_apply(params, TINY, x_t, ctx, mask, t)
            return float(np.mean((pred - eps) ** 2))

        worst, checked = gradcheck(loss, params, grads, rng, per_tensor=10)
        assert worst < 1e-4
        assert checked > 50  # every tensor sampled, small ones exhaustively


class TestTraining:
    def test_refuses_abnormal_subjects(self):
        records = healthy_cohort(3)
        sick = SubjectRecord("sick", records[0].views,
                             {"abn": True, "acl": True, "men": False})
        cfg = diffusion.DiffusionTrainConfig(timesteps=4, steps=1)
        with pytest.raises(ValueError, match="healthy"):
            diffusion.train_persona(records + [sick], cfg)

    def test_zero_steps_keeps_init(self):
        records = healthy_cohort(3)
        cfg = diffusion.DiffusionTrainConfig(timesteps=4, steps=0, widths=(2, 3, 4), seed=9)
        model = diffusion.train_persona(records, cfg)
        rng = np.random.default_rng(9)
        init = diffusion.init_denoiser_params(diffusion.DenoiserConfig(widths=(2, 3, 4)), rng)
        for key in init:
            assert np.array_equal(model.params[key],
                                  init[key].astype(np.float32).astype(np.float64))

    def test_deterministic_per_seed(self, tmp_path):
        records = healthy_cohort(4)
        cfg = diffusion.DiffusionTrainConfig(timesteps=6, steps=8, widths=(2, 3, 4),
                                             batch_size=2, val_volumes=2, seed=5)
        a = diffusion.train_persona(records, cfg)
        b = diffusion.train_persona(records, cfg)
        for key in a.params:
            assert np.array_equal(a.params[key], b.params[key])
        diffusion.save_diffusion_model(a, tmp_path / "a.json")
        diffusion.save_diffusion_model(b, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_loss_decreases_on_small_run(self):
        records = healthy_cohort(8, dims=(8, 16, 16), seed=11)
        cfg = diffusion.DiffusionTrainConfig(timesteps=10, steps=120, batch_size=4,
                                             lr=2e-3, val_volumes=6, val_every=40, seed=0)
        model = diffusion.train_persona(records, cfg)
        first = model.history[0][1]
        last = model.history[-1][1]
        assert last < first


class TestInpaint:
    def _tiny_model(self, T=2):
        rng = np.random.default_rng(6)
        params = diffusion.init_denoiser_params(TINY, rng)
        schedule = diffusion.make_schedule(T, 1e-4, 2e-2)
        return diffusion.DiffusionModel(schedule, TINY, params, {}, 0)

    def test_context_bit_identical(self):
        rng = np.random.default_rng(7)
        model = self._tiny_model(T=3)
        v = Volume(rng.random((8, 8, 8)).astype(np.float32).astype(np.float64))
        mask = BoxMask((2, 2, 2), (4, 4, 4))
        out = diffusion.inpaint(model, v, mask, seed=1)
        inside = mask.to_array(v.dims)
        assert np.array_equal(out.data[~inside], v.data[~inside])
        assert np.isfinite(out.data).all()

    def test_untrained_t2_finite(self):
        model = self._tiny_model(T=2)
        v = Volume(np.random.default_rng(8).random((4, 4, 4)))
        out = diffusion.inpaint(model, v, BoxMask((1, 1, 1), (2, 2, 2)), seed=0)
        assert out.dims == v.dims
        assert np.isfinite(out.data).all()

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(9)
        model = self._tiny_model(T=4)
        v = Volume(rng.random((4, 8, 8)))
        mask = BoxMask((1, 2, 2), (2, 4, 4))
        a = diffusion.inpaint(model, v, mask, seed=7)
        b = diffusion.inpaint(model, v, mask, seed=7)
        c = diffusion.inpaint(model, v, mask, seed=8)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_mask_out_of_bounds(self):
        model = self._tiny_model()
        v = Volume(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError):
            diffusion.inpaint(model, v, BoxMask((3, 0, 0), (2, 1, 1)), seed=0)

    def test_batch_matches_scheduling_invariance(self):
        rng = np.random.default_rng(10)
        model = self._tiny_model(T=3)
        stack = rng.random((5, 4, 4, 4)).astype(np.float32)
        mask = BoxMask((1, 1, 1), (2, 2, 2))
        seq = diffusion.reconstruct_many(model, stack, mask, 3, chunk=2, processes=1)
        par = diffusion.reconstruct_many(model, stack, mask, 3, chunk=2, processes=2)
        assert np.array_equal(seq, par)


class TestResidual:
    def test_identity_and_zero(self):
        rng = np.random.default_rng(11)
        v = Volume(rng.random((3, 3, 3)).astype(np.float32).astype(np.float64))
        p = Volume(rng.random((3, 3, 3)).astype(np.float32).astype(np.float64))
        assert (diffusion.residual(v, v).data == 0).all()
        assert np.array_equal(diffusion.residual(v, Volume(np.zeros((3, 3, 3)))).data, v.data)
        back = diffusion.residual(v, p).data + p.data
        assert np.abs(back - v.data).max() < 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            diffusion.residual(Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3))))


class TestModelSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        records = healthy_cohort(3)
        cfg = diffusion.DiffusionTrainConfig(timesteps=5, steps=4, widths=(2, 3, 4),
                                             batch_size=2, val_volumes=2, seed=12)
        model = diffusion.train_persona(records, cfg)
        path = tmp_path / "model.json"
        diffusion.save_diffusion_model(model, path)
        back = diffusion.load_diffusion_model(path)
        assert back.schedule.T == model.schedule.T
        assert back.config == model.config
        for key in model.params:
            assert np.array_equal(back.params[key], model.params[key])
        # saving the loaded model reproduces the file byte for byte
        diffusion.save_diffusion_model(back, tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()
