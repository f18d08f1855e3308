"""Minimal volumetric network ops in numpy with exact hand-coded gradients.

Spatial tensors use a channels-first, batch-last layout (C, D, H, W, B):
with the batch fastest in memory, im2col slab copies run in long contiguous
blocks and every convolution reduces to a single 2-D GEMM, which is what
makes the hand-rolled nets usable on CPU.  Backward passes mirror the
forward slicing offset by offset, so gradients are exact and
finite-difference checkable in float64.
"""

from __future__ import annotations

import ctypes

import numpy as np
from scipy.special import expit as sigmoid


def _tune_malloc() -> None:
    # glibc hands large freed buffers back to the kernel; the page faults on
    # re-allocation dominate this allocation-heavy workload.  Keep the heap.
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)    # M_MMAP_MAX = 0
        libc.mallopt(-1, -1)   # M_TRIM_THRESHOLD: never trim
    except (OSError, AttributeError):
        pass


_tune_malloc()

_OFFSETS = [(dz, dy, dx) for dz in range(3) for dy in range(3) for dx in range(3)]


def conv_out_dims(dims, stride: int):
    return tuple((d + 2 - 3) // stride + 1 for d in dims)


def _offset_slices(offset, stride, out_dims):
    return tuple(slice(o, o + (n - 1) * stride + 1, stride)
                 for o, n in zip(offset, out_dims))


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """3x3x3 convolution, padding 1.  x is (C, D, H, W, B); returns (out, cache)."""
    c_in, d, h, wd, batch = x.shape
    c_out = w.shape[0]
    out_dims = conv_out_dims((d, h, wd), stride)
    n_cols = out_dims[0] * out_dims[1] * out_dims[2] * batch
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((c_in, 27) + out_dims + (batch,), dtype=x.dtype)
    for k, offset in enumerate(_OFFSETS):
        zsl, ysl, xsl = _offset_slices(offset, stride, out_dims)
        cols[:, k] = xp[:, zsl, ysl, xsl, :]
    cols = cols.reshape(c_in * 27, n_cols)
    w2 = w.reshape(c_out, c_in * 27).astype(x.dtype, copy=False)
    out = (w2 @ cols).reshape((c_out,) + out_dims + (batch,))
    out += b.astype(x.dtype, copy=False).reshape(-1, 1, 1, 1, 1)
    cache = (cols, x.shape, w, stride, out_dims)
    return out, cache


def conv3d_infer(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1,
                 tile_bytes: int = 4 << 20) -> np.ndarray:
    """Forward-only conv3d, cache-blocked over output z so the im2col tile
    stays resident instead of round-tripping 27x the input through DRAM."""
    c_in, d, h, wd, batch = x.shape
    c_out = w.shape[0]
    out_dims = conv_out_dims((d, h, wd), stride)
    od, oh, ow = out_dims
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    w2 = w.reshape(c_out, c_in * 27).astype(x.dtype, copy=False)
    bias = b.astype(x.dtype, copy=False).reshape(-1, 1)
    out = np.empty((c_out,) + out_dims + (batch,), dtype=x.dtype)
    slab = oh * ow * batch * c_in * 27 * x.dtype.itemsize
    zt = max(1, min(od, tile_bytes // max(slab, 1)))
    cols = np.empty((c_in, 27, zt, oh, ow, batch), dtype=x.dtype)
    for z0 in range(0, od, zt):
        z1 = min(z0 + zt, od)
        n = z1 - z0
        tile = cols[:, :, :n]
        for k, (dz, dy, dx) in enumerate(_OFFSETS):
            tile[:, k] = xp[:, dz + z0 * stride:dz + (z1 - 1) * stride + 1:stride,
                            dy:dy + (oh - 1) * stride + 1:stride,
                            dx:dx + (ow - 1) * stride + 1:stride, :]
        prod = w2 @ tile.reshape(c_in * 27, -1)
        prod += bias
        out[:, z0:z1] = prod.reshape(c_out, n, oh, ow, batch)
    return out


def conv3d_backward(dout: np.ndarray, cache):
    """Gradients of conv3d_forward; returns (dx, dw, db)."""
    cols, x_shape, w, stride, out_dims = cache
    c_in, batch = x_shape[0], x_shape[4]
    c_out = w.shape[0]
    db = dout.sum(axis=(1, 2, 3, 4))
    dflat = dout.reshape(c_out, -1)
    dw = (dflat @ cols.T).reshape(w.shape)
    w2 = w.reshape(c_out, c_in * 27).astype(dout.dtype, copy=False)
    dcols = (w2.T @ dflat).reshape((c_in, 27) + out_dims + (batch,))
    padded = tuple(s + 2 for s in x_shape[1:4])
    dxp = np.zeros((c_in,) + padded + (batch,), dtype=dout.dtype)
    for k, offset in enumerate(_OFFSETS):
        zsl, ysl, xsl = _offset_slices(offset, stride, out_dims)
        dxp[:, zsl, ysl, xsl, :] += dcols[:, k]
    return dxp[:, 1:-1, 1:-1, 1:-1, :], dw, db


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """1x1x1 convolution: per-voxel channel mix.  w is (Cout, Cin)."""
    c_in = x.shape[0]
    w = w.astype(x.dtype, copy=False)
    out = (w @ x.reshape(c_in, -1)).reshape((w.shape[0],) + x.shape[1:])
    out += b.astype(x.dtype, copy=False).reshape(-1, 1, 1, 1, 1)
    return out, (x, w)


def pointwise_backward(dout: np.ndarray, cache):
    x, w = cache
    c_in = x.shape[0]
    dflat = dout.reshape(dout.shape[0], -1)
    xflat = x.reshape(c_in, -1)
    db = dout.sum(axis=(1, 2, 3, 4))
    dw = dflat @ xflat.T
    dx = (w.T @ dflat).reshape(x.shape)
    return dx, dw, db


def silu_forward(x: np.ndarray):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout: np.ndarray, cache):
    x, s = cache
    return dout * (s * (1.0 + x * (1.0 - s)))


def global_avg_pool_forward(x: np.ndarray):
    """(C, D, H, W, B) -> (B, C) mean over space."""
    return x.mean(axis=(1, 2, 3)).T, x.shape


def global_avg_pool_backward(dout: np.ndarray, x_shape):
    c, d, h, w, b = x_shape
    scaled = (dout / (d * h * w)).T
    return np.broadcast_to(scaled[:, None, None, None, :], x_shape).astype(dout.dtype, copy=True)


def upsample_nearest2_forward(x: np.ndarray):
    out = np.repeat(np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), 2, axis=3)
    return out, x.shape


def upsample_nearest2_backward(dout: np.ndarray, x_shape):
    c, d, h, w, b = x_shape
    return dout.reshape(c, d, 2, h, 2, w, 2, b).sum(axis=(2, 4, 6))


def layernorm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Normalize each row of (B, N) to zero mean / unit variance, then scale and shift."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layernorm_backward(dout: np.ndarray, cache):
    xhat, inv, gain = cache
    dgain = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    dxhat = dout * gain
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dgain, dbias


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x (B, I) @ w (I, O) + b."""
    return x @ w + b, (x, w)


def linear_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def batch_to_cfb(x: np.ndarray) -> np.ndarray:
    """(B, C, D, H, W) -> contiguous (C, D, H, W, B)."""
    return np.ascontiguousarray(np.moveaxis(x, 0, -1))


def cfb_to_batch(x: np.ndarray) -> np.ndarray:
    """(C, D, H, W, B) -> contiguous (B, C, D, H, W)."""
    return np.ascontiguousarray(np.moveaxis(x, -1, 0))


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    """In-place SGD with momentum; velocity dict is created lazily per key."""
    for key, g in grads.items():
        v = velocity.get(key)
        if v is None:
            v = np.zeros_like(g)
            velocity[key] = v
        v *= momentum
        v -= lr * g
        params[key] += v


def params_to_jsonable(params: dict) -> dict:
    """Flatten a name->array dict to lists (row-major) with shapes."""
    return {
        name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
        for name, arr in sorted(params.items())
    }


def params_from_jsonable(blob: dict) -> dict:
    return {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in blob.items()
    }
