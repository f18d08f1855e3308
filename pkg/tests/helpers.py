"""Independent brute-force oracles and a finite-difference gradient checker.

These deliberately re-derive everything from first principles (python loops,
sorted lists, itertools) so they share no code path with the library.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def percentile_oracle(sorted_values, q) -> float:
    # linear interpolation between order statistics
    n = len(sorted_values)
    h = (n - 1) * q / 100.0
    lo = math.floor(h)
    hi = math.ceil(h)
    return sorted_values[lo] + (h - lo) * (sorted_values[hi] - sorted_values[lo])


def first_order_oracle(values) -> dict:
    vals = [float(v) for v in values]
    n = len(vals)
    xs = sorted(vals)
    mn, mx = xs[0], xs[-1]
    mean = sum(vals) / n
    energy = sum(v * v for v in vals)
    p10 = percentile_oracle(xs, 10)
    p25 = percentile_oracle(xs, 25)
    p50 = percentile_oracle(xs, 50)
    p75 = percentile_oracle(xs, 75)
    p90 = percentile_oracle(xs, 90)
    var = sum((v - mean) ** 2 for v in vals) / n
    std = math.sqrt(var)
    mad = sum(abs(v - mean) for v in vals) / n
    sub = [v for v in vals if p10 <= v <= p90]
    if sub:
        sub_mean = sum(sub) / len(sub)
        rmad = sum(abs(v - sub_mean) for v in sub) / len(sub)
    else:
        rmad = 0.0  # the defined degenerate case: nothing falls inside [P10, P90]
    if mx > mn:
        counts = [0] * 32
        for v in vals:
            b = int((v - mn) / (mx - mn) * 32)
            counts[min(b, 31)] += 1
        probs = [c / n for c in counts if c > 0]
        entropy = -sum(p * math.log2(p) for p in probs)
        uniformity = sum(p * p for p in probs)
    else:
        entropy, uniformity = 0.0, 1.0
    if std > 0:
        skewness = sum((v - mean) ** 3 for v in vals) / n / std**3
        kurtosis = sum((v - mean) ** 4 for v in vals) / n / std**4
    else:
        skewness, kurtosis = 0.0, 0.0
    return {
        "Energy": energy,
        "TotalEnergy": energy,
        "Entropy": entropy,
        "Minimum": mn,
        "Percentile10": p10,
        "Percentile90": p90,
        "Maximum": mx,
        "Mean": mean,
        "Median": p50,
        "InterquartileRange": p75 - p25,
        "Range": mx - mn,
        "MeanAbsoluteDeviation": mad,
        "RobustMeanAbsoluteDeviation": rmad,
        "RootMeanSquared": math.sqrt(energy / n),
        "StandardDeviation": std,
        "Skewness": skewness,
        "Kurtosis": kurtosis,
        "Variance": var,
        "Uniformity": uniformity,
    }


def surface_area_oracle(mask: np.ndarray) -> int:
    d, h, w = mask.shape
    faces = 0
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nz, ny, nx = z + dz, y + dy, x + dx
                    if not (0 <= nz < d and 0 <= ny < h and 0 <= nx < w) or not mask[nz, ny, nx]:
                        faces += 1
    return faces


def max_diameter_oracle(mask: np.ndarray) -> float:
    pts = [tuple(p) for p in np.argwhere(mask)]
    best = 0.0
    for a, b in itertools.combinations(pts, 2):
        best = max(best, sum((i - j) ** 2 for i, j in zip(a, b)))
    return math.sqrt(best)


def marginalize_oracle(beta, u, r, intercept=None) -> float:
    n = len(u)
    total = 0.0
    for z in itertools.product((0, 1), repeat=n):
        prob = 1.0
        logit = 0.0 if intercept is None else float(intercept)
        for k in range(n):
            prob *= u[k] if z[k] else (1.0 - u[k])
            if z[k]:
                logit += beta[k] * r[k]
        total += prob * sigmoid(logit)
    return total


def auc_rank_oracle(scores, labels) -> float:
    # Mann-Whitney U from midranks, an independent formulation of pair counting
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = midrank
        i = j + 1
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    rank_sum = sum(rank for rank, lab in zip(ranks, labels) if lab)
    u_stat = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


def youden_scan_oracle(scores, labels):
    candidates = {0.0, 1.0}
    distinct = sorted(set(scores))
    candidates.update(distinct)
    for a, b in zip(distinct[:-1], distinct[1:]):
        candidates.add((a + b) / 2.0)
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    best_t, best_j = None, -math.inf
    for t in sorted(candidates):
        tp = sum(1 for s, lab in zip(scores, labels) if lab and s >= t)
        tn = sum(1 for s, lab in zip(scores, labels) if not lab and s < t)
        j = tp / n_pos + tn / n_neg - 1.0
        if j > best_j + 1e-15:
            best_j = j
            best_t = t
    return best_t, best_j


def naive_conv3d(x, w, b, stride):
    """Direct 7-loop reference convolution in batch-first layout."""
    n_b, c_in, d, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    od = (d - 1) // stride + 1
    oh = (h - 1) // stride + 1
    ow = (wd - 1) // stride + 1
    out = np.zeros((n_b, c_out, od, oh, ow))
    for bb in range(n_b):
        for f in range(c_out):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = b[f]
                        for c in range(c_in):
                            for kz in range(3):
                                for ky in range(3):
                                    for kx in range(3):
                                        acc += (w[f, c, kz, ky, kx]
                                                * xp[bb, c, z * stride + kz,
                                                     y * stride + ky, xx * stride + kx])
                        out[bb, f, z, y, xx] = acc
    return out


def gradcheck(loss_fn, params: dict, grads: dict, rng: np.random.Generator,
              per_tensor: int | None = None, h_scale: float = 1e-5,
              rel_tol: float = 1e-4, zero_band: float = 1e-6, abs_tol: float = 1e-9):
    """Central finite differences against analytic gradients.

    Elements where both |fd| and |analytic| are below `zero_band` carry no
    measurable relative error at 64-bit and are checked absolutely instead.
    Returns (worst relative error, number of elements checked).
    """
    worst = 0.0
    checked = 0
    for name in sorted(params):
        arr = params[name]
        flat = arr.ravel()
        gf = grads[name].ravel()
        if per_tensor is None or per_tensor >= flat.size:
            indices = range(flat.size)
        else:
            indices = rng.choice(flat.size, size=per_tensor, replace=False)
        for i in indices:
            old = flat[i]
            h = h_scale * max(1.0, abs(old))
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            fd = (lp - lm) / (2.0 * h)
            g = gf[i]
            scale = max(abs(fd), abs(g))
            if scale < zero_band:
                assert abs(fd - g) < abs_tol, \
                    f"{name}[{i}]: near-zero gradient mismatch fd={fd:.3e} analytic={g:.3e}"
                err = 0.0
            else:
                err = abs(fd - g) / scale
                assert err < rel_tol, \
                    f"{name}[{i}]: rel err {err:.3e} (fd={fd:.6e} analytic={g:.6e})"
            worst = max(worst, err)
            checked += 1
    return worst, checked
