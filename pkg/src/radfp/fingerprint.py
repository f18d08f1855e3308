"""Image-conditioned feature usage with a transparent logistic classifier.

A small per-view convolutional network predicts usage weights u in (0,1)^N
for the N candidate radiomic features of a subject; a logistic regression
with global coefficients beta classifies from the usage-weighted features.
Both are trained jointly from condition labels with an L1 penalty on u and a
squared-L2 penalty on beta.  The latent-variable view (independent Bernoulli
usage indicators marginalized exactly) is available for small N as an oracle.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit as sigmoid

from . import nnops
from .dataset import VIEWS
from .features import (FeatureVector, StandardizerStats, FeatureId,
                       feature_vector_length, fit_standardizer, standardize)
from .metrics import ScoredLabels, roc_auc, youden_threshold
from .volume import Volume

MODEL_VERSION = "1"
MARGINALIZE_MAX_N = 20


@dataclass(frozen=True)
class UsageNetConfig:
    """Per-view branch of 3 stride-2 conv blocks, pooled, concatenated, one FC layer."""

    n_features: int
    widths: tuple[int, int, int] = (8, 16, 32)
    views: tuple[str, ...] = VIEWS


def init_usage_params(config: UsageNetConfig, rng: np.random.Generator) -> dict:
    w1, w2, w3 = config.widths
    params = {}
    for view in config.views:
        params[f"{view}_c1_w"] = nnops.he_normal(rng, (w1, 1, 3, 3, 3), 27)
        params[f"{view}_c1_b"] = np.zeros(w1)
        params[f"{view}_c2_w"] = nnops.he_normal(rng, (w2, w1, 3, 3, 3), w1 * 27)
        params[f"{view}_c2_b"] = np.zeros(w2)
        params[f"{view}_c3_w"] = nnops.he_normal(rng, (w3, w2, 3, 3, 3), w2 * 27)
        params[f"{view}_c3_b"] = np.zeros(w3)
    fan = w3 * len(config.views)
    params["fc_w"] = rng.normal(0.0, 1.0 / np.sqrt(fan), (fan, config.n_features))
    params["fc_b"] = np.zeros(config.n_features)
    params["ln_g"] = np.ones(config.n_features)
    params["ln_b"] = np.zeros(config.n_features)
    return params


def usage_apply(params: dict, config: UsageNetConfig, view_arrays: dict,
                want_cache: bool = False):
    """Batched usage weights; view_arrays maps view -> (B, 1, D, H, W)."""
    embeddings = []
    caches = {}
    for view in config.views:
        x = nnops.batch_to_cfb(view_arrays[view])
        h1, c1 = nnops.conv3d_forward(x, params[f"{view}_c1_w"], params[f"{view}_c1_b"], stride=2)
        a1, s1 = nnops.silu_forward(h1)
        h2, c2 = nnops.conv3d_forward(a1, params[f"{view}_c2_w"], params[f"{view}_c2_b"], stride=2)
        a2, s2 = nnops.silu_forward(h2)
        h3, c3 = nnops.conv3d_forward(a2, params[f"{view}_c3_w"], params[f"{view}_c3_b"], stride=2)
        a3, s3 = nnops.silu_forward(h3)
        g, gshape = nnops.global_avg_pool_forward(a3)
        embeddings.append(g)
        caches[view] = (c1, s1, c2, s2, c3, s3, gshape)
    h = np.concatenate(embeddings, axis=1)
    z, c_fc = nnops.linear_forward(h, params["fc_w"], params["fc_b"])
    y, c_ln = nnops.layernorm_forward(z, params["ln_g"], params["ln_b"])
    u = sigmoid(y)
    if not want_cache:
        return u
    return u, {"views": caches, "c_fc": c_fc, "c_ln": c_ln, "u": u,
               "emb_width": config.widths[2], "config": config}


def usage_backward(du: np.ndarray, cache) -> dict:
    config: UsageNetConfig = cache["config"]
    u = cache["u"]
    dy = du * u * (1.0 - u)
    dz, dg_ln, db_ln = nnops.layernorm_backward(dy, cache["c_ln"])
    grads = {"ln_g": dg_ln, "ln_b": db_ln}
    dh, grads["fc_w"], grads["fc_b"] = nnops.linear_backward(dz, cache["c_fc"])
    w3 = cache["emb_width"]
    for vi, view in enumerate(config.views):
        c1, s1, c2, s2, c3, s3, gshape = cache["views"][view]
        dgap = dh[:, vi * w3:(vi + 1) * w3]
        da3 = nnops.global_avg_pool_backward(dgap, gshape)
        dh3 = nnops.silu_backward(da3, s3)
        da2, grads[f"{view}_c3_w"], grads[f"{view}_c3_b"] = nnops.conv3d_backward(dh3, c3)
        dh2 = nnops.silu_backward(da2, s2)
        da1, grads[f"{view}_c2_w"], grads[f"{view}_c2_b"] = nnops.conv3d_backward(dh2, c2)
        dh1 = nnops.silu_backward(da1, s1)
        _, grads[f"{view}_c1_w"], grads[f"{view}_c1_b"] = nnops.conv3d_backward(dh1, c1)
    return grads


def usage_forward(params: dict, config: UsageNetConfig, views: dict[str, Volume]) -> np.ndarray:
    """Usage weights u in (0, 1)^N for one subject's three views."""
    arrays = {}
    dims = None
    for view in config.views:
        vol = views[view]
        if dims is None:
            dims = vol.dims
        elif vol.dims != dims:
            raise ValueError(f"view {view} dims {vol.dims} differ from {dims}")
        arrays[view] = vol.data[None, None]
    return usage_apply(params, config, arrays)[0]


def predict_prob(beta: np.ndarray, u: np.ndarray, r: np.ndarray,
                 intercept: float | None = None) -> float:
    """Relaxed prediction sigma(sum_n beta_n u_n r_n [+ intercept])."""
    beta = np.asarray(beta, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if not (beta.shape == u.shape == r.shape):
        raise ValueError(f"length mismatch: beta {beta.shape}, u {u.shape}, r {r.shape}")
    logit = float(np.dot(beta * r, u))
    if intercept is not None:
        logit += float(intercept)
    return float(sigmoid(logit))


def hard_select(u: np.ndarray, usage_threshold: float) -> np.ndarray:
    """Binary selection z_n = 1 iff u_n >= threshold."""
    u = np.asarray(u, dtype=np.float64)
    if u.size and (u.min() < 0.0 or u.max() > 1.0):
        raise ValueError("usage weights must lie in [0, 1]")
    return (u >= usage_threshold).astype(np.int64)


def marginalize_exact(beta: np.ndarray, u: np.ndarray, r: np.ndarray,
                      intercept: float | None = None) -> float:
    """Exact Bernoulli marginalization over all 2^N usage patterns (N <= 20)."""
    beta = np.asarray(beta, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    n = u.size
    if n > MARGINALIZE_MAX_N:
        raise ValueError(f"N={n} exceeds enumeration bound {MARGINALIZE_MAX_N}")
    br = beta * r
    idx = np.arange(1 << n, dtype=np.int64)
    logits = np.zeros(idx.size)
    probs = np.ones(idx.size)
    for k in range(n):
        bit = (idx >> k) & 1
        logits += bit * br[k]
        probs *= np.where(bit, u[k], 1.0 - u[k])
    if intercept is not None:
        logits += float(intercept)
    return float(np.sum(probs * sigmoid(logits)))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def weighted_bce(c: np.ndarray, logits: np.ndarray, pos_weight: float) -> np.ndarray:
    """Per-sample positive-weighted binary cross-entropy from logits."""
    c = c.astype(np.float64)
    return pos_weight * c * _softplus(-logits) + (1.0 - c) * _softplus(logits)


@dataclass(eq=False)
class Batch:
    """One training batch: standardized features, labels, and raw view stacks."""

    r: np.ndarray                       # (B, N) standardized features
    labels: np.ndarray                  # (B,) bool
    view_arrays: dict | None = None     # view -> (B, 1, D, H, W); None in NoFS mode


def _usage_for_batch(batch: Batch, alpha, usage_cfg, want_cache=False):
    if alpha is None:
        u = np.ones_like(batch.r)
        return (u, None) if want_cache else u
    return usage_apply(alpha, usage_cfg, batch.view_arrays, want_cache=want_cache)


def objective(batch: Batch, alpha: dict | None, beta: np.ndarray,
              usage_cfg: UsageNetConfig | None, lambda_u: float, lambda_beta: float,
              pos_weight: float, intercept: float | None = None) -> float:
    """Mean weighted BCE plus lambda_u * per-subject ||u||_1, plus lambda_beta * ||beta||^2."""
    if batch.r.shape[0] == 0:
        raise ValueError("empty batch")
    u = _usage_for_batch(batch, alpha, usage_cfg)
    logits = (batch.r * u) @ beta
    if intercept is not None:
        logits = logits + intercept
    loss = float(np.mean(weighted_bce(batch.labels, logits, pos_weight)))
    loss += lambda_u * float(np.mean(np.sum(u, axis=1)))
    loss += lambda_beta * float(np.dot(beta, beta))
    return loss


def grad_objective(batch: Batch, alpha: dict | None, beta: np.ndarray,
                   usage_cfg: UsageNetConfig | None, lambda_u: float, lambda_beta: float,
                   pos_weight: float, intercept: float | None = None):
    """Analytic gradients of `objective`; returns (loss, dalpha, dbeta, dintercept)."""
    if batch.r.shape[0] == 0:
        raise ValueError("empty batch")
    b = batch.r.shape[0]
    out = _usage_for_batch(batch, alpha, usage_cfg, want_cache=True)
    u, cache = out
    logits = (batch.r * u) @ beta
    if intercept is not None:
        logits = logits + intercept
    c = batch.labels.astype(np.float64)
    loss = float(np.mean(weighted_bce(batch.labels, logits, pos_weight)))
    loss += lambda_u * float(np.mean(np.sum(u, axis=1)))
    loss += lambda_beta * float(np.dot(beta, beta))
    p = sigmoid(logits)
    dlogit = ((1.0 - c) * p - pos_weight * c * (1.0 - p)) / b
    dbeta = (batch.r * u).T @ dlogit + 2.0 * lambda_beta * beta
    dintercept = float(dlogit.sum()) if intercept is not None else None
    dalpha = None
    if alpha is not None:
        # u is strictly inside (0,1) under a sigmoid, so d|u|/du = 1 everywhere.
        du = dlogit[:, None] * (beta[None, :] * batch.r) + lambda_u / b
        dalpha = usage_backward(du, cache)
    return loss, dalpha, dbeta, dintercept


@dataclass(frozen=True)
class FingerprintTrainConfig:
    task: str
    mode: str
    grid_n: int
    usage_threshold: float = 0.4
    lambda_u: float = 1e-4
    lambda_beta: float = 1e-3
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    use_usage_predictor: bool = True
    use_intercept: bool = False
    usage_widths: tuple[int, int, int] = (8, 16, 32)
    threshold_every: int = 10


@dataclass(eq=False)
class FingerprintData:
    """Subjects prepared for training: raw features, labels for one task, view stacks."""

    subject_ids: list[str]
    features: list[FeatureVector]
    labels: np.ndarray
    view_arrays: dict | None

    def __post_init__(self):
        if len(self.subject_ids) != len(self.features) or len(self.subject_ids) != self.labels.size:
            raise ValueError("inconsistent data lengths")


def build_fingerprint_data(records, features_by_subject: dict[str, FeatureVector],
                           task: str, with_views: bool = True) -> FingerprintData:
    ids = [r.subject_id for r in records]
    features = [features_by_subject[sid] for sid in ids]
    labels = np.array([r.labels[task] for r in records], dtype=bool)
    view_arrays = None
    if with_views:
        view_arrays = {view: np.stack([r.views[view].data for r in records])[:, None]
                       for view in VIEWS}
    return FingerprintData(ids, features, labels, view_arrays)


@dataclass(eq=False)
class FingerprintModel:
    task: str
    mode: str
    grid_n: int
    alpha: dict | None
    usage_cfg: UsageNetConfig | None
    beta: np.ndarray
    intercept: float | None
    stats: StandardizerStats
    usage_threshold: float
    decision_threshold: float
    lambda_u: float
    lambda_beta: float
    pos_weight: float
    seed: int
    feature_ids: tuple[FeatureId, ...]
    history: dict = field(default_factory=dict)
    version: str = MODEL_VERSION

    def usage(self, views: dict[str, Volume]) -> np.ndarray:
        if self.alpha is None:
            return np.ones(self.beta.size)
        return usage_forward(self.alpha, self.usage_cfg, views)

    def predict(self, views: dict[str, Volume] | None, fv: FeatureVector):
        """Returns (probability, usage weights, standardized features)."""
        r = standardize(fv, self.stats).values
        if self.alpha is None:
            u = np.ones_like(r)
        else:
            u = usage_forward(self.alpha, self.usage_cfg, views)
        return predict_prob(self.beta, u, r, self.intercept), u, r


def _slice_batch(data: FingerprintData, r_std: np.ndarray, idx: np.ndarray) -> Batch:
    views = None
    if data.view_arrays is not None:
        views = {view: arr[idx] for view, arr in data.view_arrays.items()}
    return Batch(r_std[idx], data.labels[idx], views)


def _val_scores(data: FingerprintData, r_std, alpha, usage_cfg, beta, intercept,
                chunk: int = 64) -> np.ndarray:
    scores = []
    for start in range(0, r_std.shape[0], chunk):
        idx = np.arange(start, min(start + chunk, r_std.shape[0]))
        batch = _slice_batch(data, r_std, idx)
        u = _usage_for_batch(batch, alpha, usage_cfg)
        logits = (batch.r * u) @ beta
        if intercept is not None:
            logits = logits + intercept
        scores.append(sigmoid(logits))
    return np.concatenate(scores)


def train_fingerprint(train: FingerprintData, val: FingerprintData,
                      config: FingerprintTrainConfig) -> FingerprintModel:
    """Joint gradient-descent training of usage predictor and classifier.

    The decision threshold is re-estimated on validation predictions by
    Youden maximization every `threshold_every` epochs and at the end.
    Deterministic per (seed, config, data).
    """
    n_pos = int(train.labels.sum())
    n_neg = train.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"training split for task {config.task!r} has a single class "
                         f"({n_pos} positives / {n_neg} negatives)")
    if not (val.labels.any() and (~val.labels).any()):
        raise ValueError(f"validation split for task {config.task!r} has a single class")
    pos_weight = n_neg / n_pos

    stats = fit_standardizer(train.features)
    r_train = np.stack([standardize(fv, stats).values for fv in train.features])
    r_val = np.stack([standardize(fv, stats).values for fv in val.features])
    n_features = r_train.shape[1]
    expected = feature_vector_length(config.grid_n, config.mode)
    if n_features != expected:
        raise ValueError(f"feature vectors have {n_features} entries, config implies {expected}")

    rng = np.random.default_rng(config.seed)
    usage_cfg = None
    alpha = None
    if config.use_usage_predictor:
        if train.view_arrays is None:
            raise ValueError("usage predictor requires view volumes in the training data")
        usage_cfg = UsageNetConfig(n_features=n_features, widths=tuple(config.usage_widths))
        alpha = init_usage_params(usage_cfg, rng)
    beta = np.zeros(n_features)
    intercept = 0.0 if config.use_intercept else None

    velocity: dict = {}
    history = {"epoch_loss": [], "val_auc": [], "thresholds": []}
    decision_threshold = 0.5
    n_train = train.labels.size

    def update_threshold(epoch):
        nonlocal decision_threshold
        scores = _val_scores(val, r_val, alpha, usage_cfg, beta, intercept)
        sl = ScoredLabels(scores, val.labels)
        decision_threshold = youden_threshold(sl)
        history["val_auc"].append((epoch, roc_auc(sl)))
        history["thresholds"].append((epoch, decision_threshold))

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = _slice_batch(train, r_train, idx)
            loss, dalpha, dbeta, dintercept = grad_objective(
                batch, alpha, beta, usage_cfg, config.lambda_u, config.lambda_beta,
                pos_weight, intercept)
            epoch_loss += loss * idx.size
            grads = {"beta": dbeta}
            params = {"beta": beta}
            if dalpha is not None:
                grads.update(dalpha)
                params.update(alpha)
            if intercept is not None:
                b_arr = np.array([intercept])
                params["intercept"] = b_arr
                grads["intercept"] = np.array([dintercept])
            nnops.sgd_step(params, grads, velocity, config.lr, config.momentum)
            if intercept is not None:
                intercept = float(params["intercept"][0])
        history["epoch_loss"].append(epoch_loss / n_train)
        if epoch % config.threshold_every == 0 or epoch == config.epochs:
            update_threshold(epoch)

    return FingerprintModel(
        task=config.task, mode=config.mode, grid_n=config.grid_n,
        alpha=alpha, usage_cfg=usage_cfg, beta=beta, intercept=intercept,
        stats=stats, usage_threshold=config.usage_threshold,
        decision_threshold=decision_threshold, lambda_u=config.lambda_u,
        lambda_beta=config.lambda_beta, pos_weight=pos_weight, seed=config.seed,
        feature_ids=tuple(train.features[0].ids), history=history)


def predict_scores(model: FingerprintModel, data: FingerprintData) -> np.ndarray:
    """Probabilities for every subject in `data`."""
    r_std = np.stack([standardize(fv, model.stats).values for fv in data.features])
    return _val_scores(data, r_std, model.alpha, model.usage_cfg, model.beta,
                       model.intercept)


@dataclass(eq=False)
class InterpretabilityReport:
    ids: tuple[FeatureId, ...]
    u: np.ndarray
    beta: np.ndarray
    r: np.ndarray
    contributions: np.ndarray
    probability: float
    logit: float
    intercept: float | None
    selected: np.ndarray
    per_patch_usage: dict

    @property
    def selected_count(self) -> int:
        return int(self.selected.sum())


def explain(model: FingerprintModel, views: dict[str, Volume] | None,
            fv: FeatureVector) -> InterpretabilityReport:
    """Per-feature contributions and per-patch usage aggregates for one subject."""
    if fv.grid_n != model.grid_n or fv.mode != model.mode:
        raise ValueError(f"feature vector config (n={fv.grid_n}, mode={fv.mode}) does not "
                         f"match model (n={model.grid_n}, mode={model.mode})")
    prob, u, r = model.predict(views, fv)
    contributions = model.beta * u * r
    logit = float(contributions.sum()) + (model.intercept or 0.0)
    per_patch: dict = {}
    sums: dict = {}
    counts: dict = {}
    for fid, weight in zip(fv.ids, u):
        key = (fid.view, fid.patch)
        sums[key] = sums.get(key, 0.0) + float(weight)
        counts[key] = counts.get(key, 0) + 1
    for (view, patch), total in sums.items():
        per_patch.setdefault(view, {})[patch] = total / counts[(view, patch)]
    return InterpretabilityReport(
        ids=fv.ids, u=u, beta=model.beta.copy(), r=r, contributions=contributions,
        probability=prob, logit=logit, intercept=model.intercept,
        selected=hard_select(u, model.usage_threshold).astype(bool),
        per_patch_usage=per_patch)


def write_report_csv(report: InterpretabilityReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "patch_ix", "patch_iy", "patch_iz", "source",
                         "feature_name", "u", "beta", "contribution"])
        for fid, u, b, c in zip(report.ids, report.u, report.beta, report.contributions):
            writer.writerow([fid.view, fid.patch[0], fid.patch[1], fid.patch[2],
                             fid.source, fid.name,
                             f"{u:.17g}", f"{b:.17g}", f"{c:.17g}"])


def report_summary_jsonable(report: InterpretabilityReport) -> dict:
    per_patch = {
        view: {",".join(str(i) for i in patch): value for patch, value in patches.items()}
        for view, patches in report.per_patch_usage.items()
    }
    return {
        "probability": report.probability,
        "logit": report.logit,
        "selected_count": report.selected_count,
        "per_patch_usage": per_patch,
    }


def write_report_summary(report: InterpretabilityReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_summary_jsonable(report), sort_keys=True, indent=1) + "\n")


def _stats_to_jsonable(stats: StandardizerStats) -> dict:
    return {"mean": [float(v) for v in stats.mean],
            "std": [float(v) for v in stats.std],
            "epsilon": stats.epsilon}


def _ids_to_jsonable(ids) -> list:
    return [[fid.view, list(fid.patch), fid.source, fid.name] for fid in ids]


def save_fingerprint_model(model: FingerprintModel, path) -> None:
    blob = {
        "version": model.version,
        "task": model.task,
        "mode": model.mode,
        "grid_n": model.grid_n,
        "thresholds": {"usage": model.usage_threshold,
                       "decision": model.decision_threshold},
        "lambda": {"u": model.lambda_u, "beta": model.lambda_beta},
        "standardizer": _stats_to_jsonable(model.stats),
        "alpha": None if model.alpha is None else nnops.params_to_jsonable(model.alpha),
        "usage_widths": None if model.usage_cfg is None else list(model.usage_cfg.widths),
        "beta": [float(v) for v in model.beta],
        "intercept": model.intercept,
        "pos_weight": model.pos_weight,
        "seed": model.seed,
        "feature_ids": _ids_to_jsonable(model.feature_ids),
        "history": model.history,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n")


def load_fingerprint_model(path) -> FingerprintModel:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {blob.get('version')!r}")
    beta = np.array(blob["beta"], dtype=np.float64)
    stats = StandardizerStats(np.array(blob["standardizer"]["mean"]),
                              np.array(blob["standardizer"]["std"]),
                              blob["standardizer"]["epsilon"])
    alpha = None
    usage_cfg = None
    if blob["alpha"] is not None:
        alpha = nnops.params_from_jsonable(blob["alpha"])
        usage_cfg = UsageNetConfig(n_features=beta.size, widths=tuple(blob["usage_widths"]))
    ids = tuple(FeatureId(v, tuple(p), s, n) for v, p, s, n in blob["feature_ids"])
    history = blob.get("history", {})
    return FingerprintModel(
        task=blob["task"], mode=blob["mode"], grid_n=blob["grid_n"],
        alpha=alpha, usage_cfg=usage_cfg, beta=beta, intercept=blob["intercept"],
        stats=stats, usage_threshold=blob["thresholds"]["usage"],
        decision_threshold=blob["thresholds"]["decision"],
        lambda_u=blob["lambda"]["u"], lambda_beta=blob["lambda"]["beta"],
        pos_weight=blob["pos_weight"], seed=blob["seed"], feature_ids=ids,
        history=history)
