import numpy as np
import pytest

from helpers import gradcheck, naive_conv3d
from radfp import nnops


def cfb(x):
    return nnops.batch_to_cfb(x)


class TestConv3d:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive(self, stride):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 4, 5, 6))
        w = rng.normal(size=(4, 3, 3, 3, 3))
        b = rng.normal(size=4)
        out, _ = nnops.conv3d_forward(cfb(x), w, b, stride)
        ref = cfb(naive_conv3d(x, w, b, stride))
        assert np.abs(out - ref).max() < 1e-12

    @pytest.mark.parametrize("stride", [1, 2])
    def test_infer_matches_forward(self, stride):
        rng = np.random.default_rng(1)
        x = cfb(rng.normal(size=(3, 2, 6, 4, 8)))
        w = rng.normal(size=(5, 2, 3, 3, 3))
        b = rng.normal(size=5)
        full, _ = nnops.conv3d_forward(x, w, b, stride)
        tiled = nnops.conv3d_infer(x, w, b, stride, tile_bytes=1 << 12)
        assert np.array_equal(full, tiled)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, stride):
        rng = np.random.default_rng(2)
        x = cfb(rng.normal(size=(2, 2, 4, 4, 4)))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        target = rng.normal(size=nnops.conv3d_forward(x, w, b, stride)[0].shape)

        def loss():
            out, _ = nnops.conv3d_forward(x, w, b, stride)
            return float(np.sum((out - target) ** 2))

        out, cache = nnops.conv3d_forward(x, w, b, stride)
        dx, dw, db = nnops.conv3d_backward(2 * (out - target), cache)
        worst, _ = gradcheck(loss, {"x": x, "w": w, "b": b},
                             {"x": dx, "w": dw, "b": db}, rng, per_tensor=20)
        assert worst < 1e-4


class TestPointwise:
    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = cfb(rng.normal(size=(2, 4, 2, 2, 2)))
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        target = rng.normal(size=(3, 2, 2, 2, 2))

        def loss():
            out, _ = nnops.pointwise_forward(x, w, b)
            return float(np.sum((out - target) ** 2))

        out, cache = nnops.pointwise_forward(x, w, b)
        dx, dw, db = nnops.pointwise_backward(2 * (out - target), cache)
        worst, _ = gradcheck(loss, {"x": x, "w": w, "b": b},
                             {"x": dx, "w": dw, "b": db}, rng, per_tensor=15)
        assert worst < 1e-4


class TestElementwiseOps:
    def test_silu_gradients(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 2, 2, 2))
        dout = rng.normal(size=x.shape)

        def loss():
            return float(np.sum(nnops.silu_forward(x)[0] * dout))

        _, cache = nnops.silu_forward(x)
        dx = nnops.silu_backward(dout, cache)
        worst, _ = gradcheck(loss, {"x": x}, {"x": dx}, rng, per_tensor=20)
        assert worst < 1e-4

    def test_gap_and_upsample_roundtrip_shapes(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 2, 4, 6, 5))
        pooled, shape = nnops.global_avg_pool_forward(x)
        assert pooled.shape == (5, 3)
        assert nnops.global_avg_pool_backward(pooled, shape).shape == x.shape
        up, shape2 = nnops.upsample_nearest2_forward(x)
        assert up.shape == (3, 4, 8, 12, 5)
        assert nnops.upsample_nearest2_backward(up, shape2).shape == x.shape

    def test_upsample_gradients(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 2, 2, 2, 2))
        dout = rng.normal(size=(2, 4, 4, 4, 2))

        def loss():
            return float(np.sum(nnops.upsample_nearest2_forward(x)[0] * dout))

        dx = nnops.upsample_nearest2_backward(dout, x.shape)
        worst, _ = gradcheck(loss, {"x": x}, {"x": dx}, rng)
        assert worst < 1e-4

    def test_layernorm_gradients(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 9))
        g = rng.normal(size=9)
        b = rng.normal(size=9)
        dout = rng.normal(size=(3, 9))

        def loss():
            return float(np.sum(nnops.layernorm_forward(x, g, b)[0] * dout))

        _, cache = nnops.layernorm_forward(x, g, b)
        dx, dg, db = nnops.layernorm_backward(dout, cache)
        worst, _ = gradcheck(loss, {"x": x, "g": g, "b": b},
                             {"x": dx, "g": dg, "b": db}, rng)
        assert worst < 1e-4


class TestMisc:
    def test_timestep_embedding_shape_and_range(self):
        emb = nnops.timestep_embedding(np.array([0, 1, 99]), 16)
        assert emb.shape == (3, 16)
        assert np.abs(emb).max() <= 1.0
        assert not np.array_equal(emb[0], emb[1])

    def test_sgd_momentum(self):
        params = {"w": np.array([1.0])}
        vel = {}
        nnops.sgd_step(params, {"w": np.array([2.0])}, vel, lr=0.1, momentum=0.5)
        assert params["w"][0] == pytest.approx(0.8)
        nnops.sgd_step(params, {"w": np.array([0.0])}, vel, lr=0.1, momentum=0.5)
        assert params["w"][0] == pytest.approx(0.7)

    def test_params_json_roundtrip(self):
        rng = np.random.default_rng(8)
        params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
        back = nnops.params_from_jsonable(nnops.params_to_jsonable(params))
        for key in params:
            assert np.array_equal(params[key], back[key])

    def test_layout_conversions(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 4, 5, 6))
        assert np.array_equal(nnops.cfb_to_batch(nnops.batch_to_cfb(x)), x)
