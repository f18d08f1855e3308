"""Volumetric denoising diffusion for healthy-persona inpainting.

A linear-schedule DDPM with a small encoder-decoder noise predictor
conditioned on the masked context and a sinusoidal timestep embedding.
Training is noise prediction on healthy subjects only; sampling does
known-region replacement so everything outside the mask stays bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import expit as sigmoid

from . import nnops
from .dataset import VIEWS, SubjectRecord
from .volume import BoxMask, Volume, central_mask

MODEL_VERSION = "1"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear beta schedule with cached alpha products."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return NoiseSchedule(T, beta_start, beta_end, betas, alphas, np.cumprod(alphas))


def forward_diffuse(x0: Volume, t: int, noise: Volume, schedule: NoiseSchedule) -> Volume:
    """Closed-form noising: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise."""
    if not (0 <= t < schedule.T):
        raise ValueError(f"t={t} outside [0, {schedule.T})")
    if x0.dims != noise.dims:
        raise ValueError(f"shape mismatch: {x0.dims} vs {noise.dims}")
    ab = schedule.alpha_bars[t]
    return Volume(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * noise.data)


@dataclass(frozen=True)
class DenoiserConfig:
    """Topology of the noise predictor; widths are (enc1, enc2, bottleneck).

    The output head sees the upsampled decoder features concatenated with the
    raw input channels, giving the network direct per-voxel access to the
    noisy volume and its context.  out_kernel 1 keeps the head pointwise
    (cheap); 3 adds a final 3x3x3 spatial mix.
    """

    widths: tuple[int, int, int] = (8, 16, 32)
    embed_dim: int = 16
    in_channels: int = 3
    out_kernel: int = 1

    def __post_init__(self):
        if self.out_kernel not in (1, 3):
            raise ValueError(f"out_kernel must be 1 or 3, got {self.out_kernel}")


def init_denoiser_params(config: DenoiserConfig, rng: np.random.Generator) -> dict:
    w1, w2, wb = config.widths
    cin = config.in_channels

    def conv(cout, cfan):
        return nnops.he_normal(rng, (cout, cfan, 3, 3, 3), cfan * 27)

    head_in = w1 + cin
    if config.out_kernel == 1:
        out_w = nnops.he_normal(rng, (1, head_in), head_in)
    else:
        out_w = conv(1, head_in)
    params = {
        "enc1_w": conv(w1, cin), "enc1_b": np.zeros(w1),
        "enc2_w": conv(w2, w1), "enc2_b": np.zeros(w2),
        "mid_w": conv(wb, w2), "mid_b": np.zeros(wb),
        "temb_w": rng.normal(0.0, 1.0 / np.sqrt(config.embed_dim), (config.embed_dim, wb)),
        "temb_b": np.zeros(wb),
        "dec2_w": conv(w2, wb), "dec2_b": np.zeros(w2),
        "dec1_w": conv(w1, w2), "dec1_b": np.zeros(w1),
        "out_w": out_w, "out_b": np.zeros(1),
    }
    return params


def _check_dims(dims) -> None:
    if any(d % 4 != 0 for d in dims):
        raise ValueError(f"denoiser needs dims divisible by 4, got {tuple(dims)}")


def denoiser_apply(params: dict, config: DenoiserConfig, x_t: np.ndarray,
                   context: np.ndarray, mask: np.ndarray, t: np.ndarray,
                   want_cache: bool = False):
    """Batched noise prediction.  x_t/context/mask are (B, D, H, W), t is (B,)."""
    _check_dims(x_t.shape[1:])
    # internal layout: (C, D, H, W, B)
    xin = np.ascontiguousarray(np.moveaxis(np.stack([x_t, context, mask], axis=0), 1, -1))
    if not want_cache:
        return _denoiser_infer(params, config, xin, t)
    h1, c_e1 = nnops.conv3d_forward(xin, params["enc1_w"], params["enc1_b"], stride=2)
    a1, s_e1 = nnops.silu_forward(h1)
    h2, c_e2 = nnops.conv3d_forward(a1, params["enc2_w"], params["enc2_b"], stride=2)
    a2, s_e2 = nnops.silu_forward(h2)
    hm, c_m = nnops.conv3d_forward(a2, params["mid_w"], params["mid_b"], stride=1)
    emb = nnops.timestep_embedding(t, config.embed_dim).astype(xin.dtype)
    proj, c_t = nnops.linear_forward(emb, params["temb_w"].astype(xin.dtype, copy=False),
                                     params["temb_b"].astype(xin.dtype, copy=False))
    hm += proj.T[:, None, None, None, :]
    am, s_m = nnops.silu_forward(hm)
    # mirrored widths make the encoder skips additive
    hd2, c_d2 = nnops.conv3d_forward(am, params["dec2_w"], params["dec2_b"], stride=1)
    hd2 += a2
    ad2, s_d2 = nnops.silu_forward(hd2)
    u2, shp2 = nnops.upsample_nearest2_forward(ad2)
    hd1, c_d1 = nnops.conv3d_forward(u2, params["dec1_w"], params["dec1_b"], stride=1)
    hd1 += a1
    ad1, s_d1 = nnops.silu_forward(hd1)
    u1, shp1 = nnops.upsample_nearest2_forward(ad1)
    head = np.concatenate([u1, xin], axis=0)
    if config.out_kernel == 1:
        out, c_o = nnops.pointwise_forward(head, params["out_w"], params["out_b"])
    else:
        out, c_o = nnops.conv3d_forward(head, params["out_w"], params["out_b"], stride=1)
    pred = np.ascontiguousarray(np.moveaxis(out[0], -1, 0))
    cache = {
        "c_e1": c_e1, "s_e1": s_e1, "c_e2": c_e2, "s_e2": s_e2,
        "c_m": c_m, "c_t": c_t, "s_m": s_m, "c_d2": c_d2, "s_d2": s_d2,
        "shp2": shp2, "c_d1": c_d1, "s_d1": s_d1, "shp1": shp1, "c_o": c_o,
        "widths": config.widths, "out_kernel": config.out_kernel,
    }
    return pred, cache


def _denoiser_infer(params: dict, config: DenoiserConfig, xin: np.ndarray,
                    t: np.ndarray) -> np.ndarray:
    """Forward pass without backward caches, using the cache-blocked convolutions."""
    def act(x):
        # in-place silu keeps the sampling loop allocation-lean
        s = sigmoid(x)
        s *= x
        return s

    a1 = act(nnops.conv3d_infer(xin, params["enc1_w"], params["enc1_b"], stride=2))
    a2 = act(nnops.conv3d_infer(a1, params["enc2_w"], params["enc2_b"], stride=2))
    hm = nnops.conv3d_infer(a2, params["mid_w"], params["mid_b"], stride=1)
    emb = nnops.timestep_embedding(t, config.embed_dim).astype(xin.dtype)
    proj = emb @ params["temb_w"].astype(xin.dtype, copy=False) + \
        params["temb_b"].astype(xin.dtype, copy=False)
    hm += proj.T[:, None, None, None, :]
    am = act(hm)
    hd2 = nnops.conv3d_infer(am, params["dec2_w"], params["dec2_b"], stride=1)
    hd2 += a2
    u2 = nnops.upsample_nearest2_forward(act(hd2))[0]
    hd1 = nnops.conv3d_infer(u2, params["dec1_w"], params["dec1_b"], stride=1)
    hd1 += a1
    u1 = nnops.upsample_nearest2_forward(act(hd1))[0]
    head = np.concatenate([u1, xin], axis=0)
    if config.out_kernel == 1:
        out = nnops.pointwise_forward(head, params["out_w"], params["out_b"])[0]
    else:
        out = nnops.conv3d_infer(head, params["out_w"], params["out_b"], stride=1)
    return np.ascontiguousarray(np.moveaxis(out[0], -1, 0))


def denoiser_backward(dpred: np.ndarray, cache) -> dict:
    """Gradients with respect to every parameter given d(loss)/d(prediction)."""
    w1, w2, wb = cache["widths"]
    grads = {}
    dout = np.moveaxis(dpred, 0, -1)[None]
    if cache["out_kernel"] == 1:
        dhead, grads["out_w"], grads["out_b"] = nnops.pointwise_backward(dout, cache["c_o"])
    else:
        dhead, grads["out_w"], grads["out_b"] = nnops.conv3d_backward(dout, cache["c_o"])
    du1 = dhead[:w1]  # gradient into the raw-input skip is not needed
    dad1 = nnops.upsample_nearest2_backward(du1, cache["shp1"])
    dhd1 = nnops.silu_backward(dad1, cache["s_d1"])
    da1_skip = dhd1  # additive skip passes the gradient through unchanged
    du2, grads["dec1_w"], grads["dec1_b"] = nnops.conv3d_backward(dhd1, cache["c_d1"])
    dad2 = nnops.upsample_nearest2_backward(du2, cache["shp2"])
    dhd2 = nnops.silu_backward(dad2, cache["s_d2"])
    da2_skip = dhd2
    dam, grads["dec2_w"], grads["dec2_b"] = nnops.conv3d_backward(dhd2, cache["c_d2"])
    dhm = nnops.silu_backward(dam, cache["s_m"])
    dproj = dhm.sum(axis=(1, 2, 3)).T
    _, grads["temb_w"], grads["temb_b"] = nnops.linear_backward(dproj, cache["c_t"])
    da2, grads["mid_w"], grads["mid_b"] = nnops.conv3d_backward(dhm, cache["c_m"])
    da2 += da2_skip
    dh2 = nnops.silu_backward(da2, cache["s_e2"])
    da1, grads["enc2_w"], grads["enc2_b"] = nnops.conv3d_backward(dh2, cache["c_e2"])
    da1 += da1_skip
    dh1 = nnops.silu_backward(da1, cache["s_e1"])
    _, grads["enc1_w"], grads["enc1_b"] = nnops.conv3d_backward(dh1, cache["c_e1"])
    return grads


def denoiser_forward(params: dict, config: DenoiserConfig, x_t: Volume,
                     context: Volume, mask: Volume, t: int) -> Volume:
    """Single-volume noise prediction; deterministic in its inputs."""
    pred = denoiser_apply(params, config, x_t.data[None], context.data[None],
                          mask.data[None], np.array([t]))
    return Volume(pred[0])


def noise_loss_and_grads(params: dict, config: DenoiserConfig, x_t, context, mask, t, eps):
    """Mean squared error between predicted and true noise, plus parameter grads."""
    pred, cache = denoiser_apply(params, config, x_t, context, mask, t, want_cache=True)
    diff = pred - eps
    loss = float(np.mean(diff**2))
    dpred = (2.0 / diff.size) * diff
    return loss, denoiser_backward(dpred, cache)


@dataclass(frozen=True)
class DiffusionTrainConfig:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    steps: int = 2000
    lr: float = 2e-3
    momentum: float = 0.9
    batch_size: int = 8
    mask_fractions: tuple[float, float, float] = (0.5, 0.3, 0.5)
    widths: tuple[int, int, int] = (8, 16, 32)
    embed_dim: int = 16
    out_kernel: int = 1
    val_volumes: int = 16
    val_every: int = 100
    seed: int = 0
    dtype: str = "float32"  # training precision; the functional API follows its inputs


@dataclass(eq=False)
class DiffusionModel:
    schedule: NoiseSchedule
    config: DenoiserConfig
    params: dict
    train_config: dict
    seed: int
    history: list = field(default_factory=list)
    version: str = MODEL_VERSION


def _collect_volumes(records: list[SubjectRecord]) -> np.ndarray:
    bad = [r.subject_id for r in records if not r.healthy]
    if bad:
        raise ValueError(f"persona training requires healthy subjects only; abnormal: {bad[:5]}")
    stack = []
    for record in records:
        for view in VIEWS:
            stack.append(record.views[view].data)
    return np.stack(stack)


def train_persona(records: list[SubjectRecord], config: DiffusionTrainConfig) -> DiffusionModel:
    """Train the noise predictor on healthy subjects; deterministic per (seed, config, data)."""
    dtype = np.dtype(config.dtype).type
    volumes = _collect_volumes(records).astype(dtype)
    dims = volumes.shape[1:]
    _check_dims(dims)
    schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    mask_box = central_mask(dims, config.mask_fractions)
    mask = mask_box.to_array(dims).astype(dtype)
    rng = np.random.default_rng(config.seed)
    net_cfg = DenoiserConfig(widths=tuple(config.widths), embed_dim=config.embed_dim,
                             out_kernel=config.out_kernel)
    params = {k: v.astype(dtype) for k, v in init_denoiser_params(net_cfg, rng).items()}

    def noised(x0, t, eps):
        sa = np.sqrt(schedule.alpha_bars[t]).astype(dtype)[:, None, None, None]
        sn = np.sqrt(1.0 - schedule.alpha_bars[t]).astype(dtype)[:, None, None, None]
        return sa * x0 + sn * eps

    n_val = min(config.val_volumes, len(volumes))
    val_idx = rng.integers(0, len(volumes), size=n_val)
    val_t = rng.integers(0, schedule.T, size=n_val)
    val_eps = rng.standard_normal((n_val,) + dims).astype(dtype)
    val_x0 = volumes[val_idx]
    val_xt = noised(val_x0, val_t, val_eps)
    val_ctx = val_x0 * (1.0 - mask)
    val_mask = np.broadcast_to(mask, val_x0.shape)

    def val_loss():
        pred = denoiser_apply(params, net_cfg, val_xt, val_ctx, val_mask, val_t)
        return float(np.mean((pred - val_eps) ** 2))

    history = [(0, val_loss())]
    velocity: dict = {}
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(volumes), size=config.batch_size)
        t = rng.integers(0, schedule.T, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size,) + dims).astype(dtype)
        x0 = volumes[idx]
        x_t = noised(x0, t, eps)
        ctx = x0 * (1.0 - mask)
        _, grads = noise_loss_and_grads(params, net_cfg, x_t, ctx,
                                        np.broadcast_to(mask, x0.shape), t, eps)
        nnops.sgd_step(params, grads, velocity, config.lr, config.momentum)
        if step % config.val_every == 0 or step == config.steps:
            history.append((step, val_loss()))

    params64 = {k: v.astype(np.float64) for k, v in params.items()}
    return DiffusionModel(schedule, net_cfg, params64,
                          train_config=asdict(config), seed=config.seed, history=history)


def _reverse_step(model: DiffusionModel, x, ctx, mask_arr, t, z, variance="beta"):
    # Python-float coefficients keep float32 work from upcasting.
    beta = float(model.schedule.betas[t])
    alpha = float(model.schedule.alphas[t])
    ab = float(model.schedule.alpha_bars[t])
    t_arr = np.full(x.shape[0], t)
    eps_hat = denoiser_apply(model.params, model.config, x, ctx, mask_arr, t_arr)
    mean = (x - (beta / np.sqrt(1.0 - ab)) * eps_hat) * (1.0 / np.sqrt(alpha))
    if t > 0:
        var = beta
        if variance == "posterior":
            ab_prev = float(model.schedule.alpha_bars[t - 1])
            var = beta * (1.0 - ab_prev) / (1.0 - ab)
        return mean + np.sqrt(var) * z
    return mean


def inpaint_batch(model: DiffusionModel, volumes: np.ndarray, mask: BoxMask,
                  seed: int, dtype=np.float32, variance: str = "beta") -> np.ndarray:
    """Reverse-diffuse the masked region of a (B, D, H, W) stack of volumes.

    Known voxels are replaced at every step with the forward-diffused
    original, and exactly with the original at the end.  `variance` picks the
    reverse-step noise scale: the default "beta" uses beta_t, "posterior"
    the smaller beta_t * (1 - abar_{t-1}) / (1 - abar_t).
    """
    if variance not in ("beta", "posterior"):
        raise ValueError(f"unknown reverse variance {variance!r}")
    dims = volumes.shape[1:]
    mask.check_fits(dims)
    _check_dims(dims)
    dtype = np.dtype(dtype).type
    rng = np.random.default_rng(seed)
    x0 = volumes.astype(dtype)
    mask_bool = mask.to_array(dims)
    mask_arr = np.broadcast_to(mask_bool.astype(dtype), x0.shape)
    ctx = x0 * (1.0 - mask_arr)
    params = {k: v.astype(dtype) for k, v in model.params.items()}
    work = DiffusionModel(model.schedule, model.config, params,
                          model.train_config, model.seed)
    T = model.schedule.T
    ab = model.schedule.alpha_bars

    def forward_known(step):
        sa = float(np.sqrt(ab[step]))
        sn = float(np.sqrt(1.0 - ab[step]))
        eps = rng.standard_normal(x0.shape, dtype=dtype)
        return sa * x0 + sn * eps

    noise = rng.standard_normal(x0.shape, dtype=dtype)
    x = np.where(mask_bool, noise, forward_known(T - 1))
    for t in range(T - 1, -1, -1):
        z = rng.standard_normal(x0.shape, dtype=dtype) if t > 0 else None
        x = _reverse_step(work, x.astype(dtype, copy=False), ctx, mask_arr, t, z, variance)
        x = x.astype(dtype, copy=False)
        if t > 0:
            x = np.where(mask_bool, x, forward_known(t - 1))
        else:
            x = np.where(mask_bool, x, x0)
    return x


def inpaint(model: DiffusionModel, v: Volume, mask: BoxMask, seed: int,
            dtype=np.float64, variance: str = "beta") -> Volume:
    """Inpaint one volume; output outside the mask is bit-identical to the input."""
    out = inpaint_batch(model, v.data[None], mask, seed, dtype=dtype, variance=variance)
    return Volume(out[0].astype(np.float64))


def chunk_seed(base_seed: int, chunk_index: int) -> int:
    """Stable per-chunk sampling seed for batched reconstruction."""
    return int(np.random.SeedSequence([int(base_seed), 101, int(chunk_index)]).generate_state(1)[0])


_WORKER_STATE: dict = {}


def _reconstruct_worker_init(model_blob, mask, dtype, chunk, base_seed,
                             variance="beta", limit_threads=False):
    _WORKER_STATE.update(model=model_blob, mask=mask, dtype=dtype,
                         chunk=chunk, base_seed=base_seed, variance=variance)
    if limit_threads:
        try:
            from threadpoolctl import threadpool_limits
            # keep the controller alive; workers each get one BLAS thread
            _WORKER_STATE["thread_limit"] = threadpool_limits(limits=1, user_api="blas")
        except ImportError:
            pass


def _reconstruct_worker(args):
    ci, stack = args
    s = _WORKER_STATE
    out = inpaint_batch(s["model"], stack, s["mask"], chunk_seed(s["base_seed"], ci),
                        dtype=s["dtype"], variance=s["variance"])
    return ci, out


def reconstruct_many(model: DiffusionModel, volumes: np.ndarray, mask: BoxMask,
                     base_seed: int, chunk: int = 8, dtype=np.float32,
                     processes: int = 1, variance: str = "beta") -> np.ndarray:
    """Inpaint a (N, D, H, W) stack in fixed chunks, optionally across processes.

    Chunk boundaries and per-chunk seeds depend only on (base_seed, chunk),
    so the result is identical however the work is scheduled.
    """
    jobs = [(ci, volumes[start:start + chunk])
            for ci, start in enumerate(range(0, len(volumes), chunk))]
    out = np.empty_like(volumes, dtype=np.dtype(dtype))
    if processes <= 1 or len(jobs) < 2:
        _reconstruct_worker_init(model, mask, dtype, chunk, base_seed, variance)
        results = map(_reconstruct_worker, jobs)
    else:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        pool = ctx.Pool(processes, initializer=_reconstruct_worker_init,
                        initargs=(model, mask, dtype, chunk, base_seed, variance, True))
        try:
            results = pool.imap_unordered(_reconstruct_worker, jobs)
            for ci, arr in results:
                out[ci * chunk:ci * chunk + len(arr)] = arr
            return out
        finally:
            pool.close()
            pool.join()
    for ci, arr in results:
        out[ci * chunk:ci * chunk + len(arr)] = arr
    return out


def residual(v: Volume, persona: Volume) -> Volume:
    """Elementwise difference v - persona."""
    if v.dims != persona.dims:
        raise ValueError(f"dim mismatch: {v.dims} vs {persona.dims}")
    return Volume(v.data - persona.data)


def save_diffusion_model(model: DiffusionModel, path) -> None:
    blob = {
        "version": model.version,
        "schedule": {"T": model.schedule.T,
                     "beta_start": model.schedule.beta_start,
                     "beta_end": model.schedule.beta_end},
        "topology": {"widths": list(model.config.widths),
                     "embed_dim": model.config.embed_dim,
                     "in_channels": model.config.in_channels,
                     "out_kernel": model.config.out_kernel},
        "weights": nnops.params_to_jsonable(model.params),
        "train_config": model.train_config,
        "seed": model.seed,
        "history": [[int(s), float(l)] for s, l in model.history],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n")


def load_diffusion_model(path) -> DiffusionModel:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {blob.get('version')!r}")
    sched = make_schedule(blob["schedule"]["T"], blob["schedule"]["beta_start"],
                          blob["schedule"]["beta_end"])
    cfg = DenoiserConfig(widths=tuple(blob["topology"]["widths"]),
                         embed_dim=blob["topology"]["embed_dim"],
                         in_channels=blob["topology"]["in_channels"],
                         out_kernel=blob["topology"]["out_kernel"])
    params = nnops.params_from_jsonable(blob["weights"])
    return DiffusionModel(sched, cfg, params, blob["train_config"], blob["seed"],
                          [(s, l) for s, l in blob["history"]])
