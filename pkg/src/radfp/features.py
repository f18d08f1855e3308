"""Candidate radiomic features: 19 first-order + 16 shape + 3 spatial indices per subpatch.

The per-patch catalogue is fixed (38 names, see FEATURE_NAMES); patient-level
vectors concatenate patches over 3 views and, depending on mode, over the
pathological image, its healthy persona, or their residual.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import VIEWS
from .volume import Volume, partition_grid

VOXEL_VOLUME = 1.0  # RVOL carries no spacing metadata; isotropic unit voxels
INTENSITY_BINS = 32
OTSU_BINS = 64

FIRST_ORDER_NAMES = (
    "Energy",
    "TotalEnergy",
    "Entropy",
    "Minimum",
    "Percentile10",
    "Percentile90",
    "Maximum",
    "Mean",
    "Median",
    "InterquartileRange",
    "Range",
    "MeanAbsoluteDeviation",
    "RobustMeanAbsoluteDeviation",
    "RootMeanSquared",
    "StandardDeviation",
    "Skewness",
    "Kurtosis",
    "Variance",
    "Uniformity",
)

SHAPE_NAMES = (
    "VoxelVolume",
    "SurfaceArea",
    "SurfaceVolumeRatio",
    "Sphericity",
    "Compactness1",
    "Compactness2",
    "SphericalDisproportion",
    "MajorAxisLength",
    "MinorAxisLength",
    "LeastAxisLength",
    "Elongation",
    "Flatness",
    "Maximum3DDiameter",
    "BBoxZ",
    "BBoxY",
    "BBoxX",
)

SPATIAL_NAMES = ("SpatialX", "SpatialY", "SpatialZ")

FEATURE_NAMES = FIRST_ORDER_NAMES + SHAPE_NAMES + SPATIAL_NAMES
FEATURES_PER_PATCH = len(FEATURE_NAMES)

SOURCES = ("path", "persona", "residual")
MODES = ("path_persona", "residual", "path_only")


def _as_array(patch) -> np.ndarray:
    arr = patch.data if isinstance(patch, Volume) else np.asarray(patch, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty patch")
    return arr.astype(np.float64, copy=False)


def first_order_features(patch) -> dict[str, float]:
    """The 19 first-order intensity statistics, in catalogue order."""
    x = _as_array(patch).ravel()
    n = x.size
    mn = float(x.min())
    mx = float(x.max())
    mean = float(x.mean())
    energy = float(np.dot(x, x))
    p10, p25, p50, p75, p90 = (float(p) for p in np.percentile(x, [10, 25, 50, 75, 90]))
    centered = x - mean
    var = float(np.mean(centered**2))
    std = float(np.sqrt(var))
    mad = float(np.mean(np.abs(centered)))
    robust = x[(x >= p10) & (x <= p90)]
    rmad = float(np.mean(np.abs(robust - robust.mean()))) if robust.size else 0.0
    if mx > mn:
        hist, _ = np.histogram(x, bins=INTENSITY_BINS, range=(mn, mx))
        p = hist / n
        nz = p[p > 0]
        entropy = float(-(nz * np.log2(nz)).sum())
        uniformity = float((p**2).sum())
    else:
        entropy = 0.0
        uniformity = 1.0
    if std > 0.0:
        skewness = float(np.mean(centered**3) / std**3)
        kurtosis = float(np.mean(centered**4) / std**4)
    else:
        skewness = 0.0
        kurtosis = 0.0
    return {
        "Energy": energy,
        "TotalEnergy": energy * VOXEL_VOLUME,
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
        "RootMeanSquared": float(np.sqrt(energy / n)),
        "StandardDeviation": std,
        "Skewness": skewness,
        "Kurtosis": kurtosis,
        "Variance": var,
        "Uniformity": uniformity,
    }


def foreground_mask(patch) -> np.ndarray:
    """Otsu threshold over a 64-bin histogram; voxels >= threshold are foreground.

    A constant patch is all-foreground.  Ties in the between-class variance
    pick the smallest split, which makes the mask deterministic.
    """
    x = _as_array(patch)
    mn = float(x.min())
    mx = float(x.max())
    if mx <= mn:
        return np.ones(x.shape, dtype=bool)
    hist, edges = np.histogram(x, bins=OTSU_BINS, range=(mn, mx))
    w = hist / x.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    cum_w = np.cumsum(w)
    cum_mu = np.cumsum(w * centers)
    mu_total = cum_mu[-1]
    w0 = cum_w[:-1]
    w1 = 1.0 - w0
    # min lands in bin 0 and max in the last bin, so every split has mass on both sides
    mu0 = cum_mu[:-1] / w0
    mu1 = (mu_total - cum_mu[:-1]) / w1
    sigma_b = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(sigma_b)) + 1
    return x >= edges[k]


def _max_pairwise_distance(coords: np.ndarray) -> float:
    # Brute-force max distance between voxel centers.  Coordinates are small
    # integers, so float32 squared distances are exact; chunking bounds memory.
    n = coords.shape[0]
    if n < 2:
        return 0.0
    pts = coords.astype(np.float32)
    sq = np.einsum("ij,ij->i", pts, pts)
    best = 0.0
    chunk = n if n * n <= 8_000_000 else max(1, 8_000_000 // n)
    for i in range(0, n, chunk):
        d2 = sq[i:i + chunk, None] + sq[None, :] - 2.0 * (pts[i:i + chunk] @ pts.T)
        best = max(best, float(d2.max()))
    return float(np.sqrt(max(best, 0.0)))


def shape_features(patch) -> dict[str, float]:
    """The 16 shape descriptors, computed on the Otsu foreground."""
    x = _as_array(patch)
    mask = foreground_mask(x)
    volume = int(mask.sum())
    adjacencies = sum(int(np.logical_and(a, b).sum()) for a, b in (
        (mask[1:], mask[:-1]),
        (mask[:, 1:], mask[:, :-1]),
        (mask[:, :, 1:], mask[:, :, :-1]),
    ))
    area = 6 * volume - 2 * adjacencies
    sphericity = (36.0 * np.pi * volume**2) ** (1.0 / 3.0) / area
    coords = np.argwhere(mask).astype(np.float64)
    bbox = coords.max(axis=0) - coords.min(axis=0) + 1.0
    if volume > 1:
        centered = coords - coords.mean(axis=0)
        cov = centered.T @ centered / volume
        lam = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    else:
        lam = np.zeros(3)
    if lam[0] > 0.0:
        elongation = float(np.sqrt(lam[1] / lam[0]))
        flatness = float(np.sqrt(lam[2] / lam[0]))
    else:
        elongation = 1.0
        flatness = 1.0
    return {
        "VoxelVolume": float(volume),
        "SurfaceArea": float(area),
        "SurfaceVolumeRatio": float(area / volume),
        "Sphericity": float(sphericity),
        "Compactness1": float(volume / (np.sqrt(np.pi) * area**1.5)),
        "Compactness2": float(36.0 * np.pi * volume**2 / area**3),
        "SphericalDisproportion": float(1.0 / sphericity),
        "MajorAxisLength": float(4.0 * np.sqrt(lam[0])),
        "MinorAxisLength": float(4.0 * np.sqrt(lam[1])),
        "LeastAxisLength": float(4.0 * np.sqrt(lam[2])),
        "Elongation": elongation,
        "Flatness": flatness,
        "Maximum3DDiameter": _max_pairwise_distance(coords),
        "BBoxZ": float(bbox[0]),
        "BBoxY": float(bbox[1]),
        "BBoxX": float(bbox[2]),
    }


def patch_feature_vector(patch, index) -> np.ndarray:
    """All 38 per-patch values: first-order, shape, then the (ix, iy, iz) index as reals."""
    ix, iy, iz = index
    fo = first_order_features(patch)
    sh = shape_features(patch)
    values = [fo[name] for name in FIRST_ORDER_NAMES]
    values += [sh[name] for name in SHAPE_NAMES]
    values += [float(ix), float(iy), float(iz)]
    return np.array(values, dtype=np.float64)


@dataclass(frozen=True)
class FeatureId:
    view: str
    patch: tuple[int, int, int]
    source: str
    name: str

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.name not in FEATURE_NAMES:
            raise ValueError(f"unknown feature name {self.name!r}")


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Provenance-tagged flat feature vector in canonical order."""

    ids: tuple[FeatureId, ...]
    values: np.ndarray
    grid_n: int
    mode: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = feature_vector_length(self.grid_n, self.mode)
        if len(self.ids) != expected or values.size != expected:
            raise ValueError(
                f"feature vector length mismatch: ids={len(self.ids)} values={values.size} expected={expected}"
            )
        if not np.isfinite(values).all():
            raise ValueError("feature vector contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "ids", tuple(self.ids))


def feature_vector_length(grid_n: int, mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    sources = 2 if mode == "path_persona" else 1
    return 3 * grid_n**3 * sources * FEATURES_PER_PATCH


def mode_sources(mode: str) -> tuple[str, ...]:
    if mode == "path_persona":
        return ("path", "persona")
    if mode == "residual":
        return ("residual",)
    if mode == "path_only":
        return ("path",)
    raise ValueError(f"unknown mode {mode!r}")


def assemble_features(views: dict[str, Volume], personas: dict[str, Volume] | None,
                      grid_n: int, mode: str) -> FeatureVector:
    """Patient-level candidate feature vector over 3 views, n^3 patches, and sources.

    Ordering is canonical: view, patch in (iz, iy, ix) lexicographic order,
    source, then catalogue order.
    """
    sources = mode_sources(mode)
    if mode != "path_only" and personas is None:
        raise ValueError(f"mode {mode!r} requires persona volumes")
    dims = views[VIEWS[0]].dims
    for view in VIEWS:
        if views[view].dims != dims:
            raise ValueError(f"view {view} dims {views[view].dims} differ from {dims}")
        if personas is not None and personas[view].dims != dims:
            raise ValueError(f"persona {view} dims {personas[view].dims} differ from {dims}")
    ids: list[FeatureId] = []
    values: list[np.ndarray] = []
    for view in VIEWS:
        per_source = {}
        per_source["path"] = partition_grid(views[view], grid_n)
        if mode == "path_persona":
            per_source["persona"] = partition_grid(personas[view], grid_n)
        elif mode == "residual":
            delta = Volume(views[view].data - personas[view].data)
            per_source["residual"] = partition_grid(delta, grid_n)
        n_patches = len(per_source[sources[0]])
        for pi in range(n_patches):
            for source in sources:
                patch = per_source[source][pi]
                vec = patch_feature_vector(patch.data, patch.index)
                for name in FEATURE_NAMES:
                    ids.append(FeatureId(view, patch.index, source, name))
                values.append(vec)
    return FeatureVector(tuple(ids), np.concatenate(values), grid_n, mode)


def project_path_only(fv: FeatureVector) -> FeatureVector:
    """Restrict a path_persona vector to its path-source entries.

    The result is identical to assembling the same views in path_only mode,
    because dropping the persona source preserves the canonical order.
    """
    if fv.mode != "path_persona":
        raise ValueError(f"can only project path_persona vectors, got mode {fv.mode!r}")
    keep = np.array([fid.source == "path" for fid in fv.ids], dtype=bool)
    ids = tuple(fid for fid, k in zip(fv.ids, keep) if k)
    return FeatureVector(ids, fv.values[keep], fv.grid_n, "path_only")


@dataclass(frozen=True, eq=False)
class StandardizerStats:
    """Per-feature z-scoring statistics fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray
    epsilon: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ValueError("mean/std shape mismatch")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if (std < self.epsilon).any():
            raise ValueError("std below epsilon floor")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def _spatial_entries(ids) -> np.ndarray:
    return np.array([fid.name in SPATIAL_NAMES for fid in ids], dtype=bool)


def fit_standardizer(train: list[FeatureVector], epsilon: float = 1e-8) -> StandardizerStats:
    """Fit per-feature mean/std on the training split; spatial indices pass through."""
    if len(train) < 2:
        raise ValueError(f"need at least 2 training vectors, got {len(train)}")
    layout = train[0].ids
    for fv in train[1:]:
        if fv.ids != layout:
            raise ValueError("feature vector layouts differ across training set")
    matrix = np.stack([fv.values for fv in train])
    mean = matrix.mean(axis=0)
    std = np.maximum(matrix.std(axis=0), epsilon)
    spatial = _spatial_entries(layout)
    mean[spatial] = 0.0
    std[spatial] = 1.0
    return StandardizerStats(mean, std, epsilon)


def standardize(fv: FeatureVector, stats: StandardizerStats) -> FeatureVector:
    if fv.values.size != stats.mean.size:
        raise ValueError(f"layout mismatch: vector has {fv.values.size} entries, stats {stats.mean.size}")
    return FeatureVector(fv.ids, (fv.values - stats.mean) / stats.std, fv.grid_n, fv.mode)


FEATURES_CSV_HEADER = ("subject_id", "view", "patch_ix", "patch_iy", "patch_iz",
                       "source", "feature_name", "value")


def write_features_csv(path, per_subject: list[tuple[str, FeatureVector]]) -> None:
    """One row per feature, values printed with 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURES_CSV_HEADER)
        for subject_id, fv in per_subject:
            for fid, value in zip(fv.ids, fv.values):
                writer.writerow([
                    subject_id, fid.view,
                    fid.patch[0], fid.patch[1], fid.patch[2],
                    fid.source, fid.name, f"{value:.17g}",
                ])


def read_features_csv(path, grid_n: int, mode: str) -> list[tuple[str, FeatureVector]]:
    """Inverse of write_features_csv; rows must be grouped by subject in canonical order."""
    expected = feature_vector_length(grid_n, mode)
    out: list[tuple[str, FeatureVector]] = []
    current_id = None
    ids: list[FeatureId] = []
    values: list[float] = []

    def flush():
        if current_id is not None:
            out.append((current_id, FeatureVector(tuple(ids), np.array(values), grid_n, mode)))

    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != FEATURES_CSV_HEADER:
            raise ValueError(f"bad features header {header}")
        for row in reader:
            sid, view, ix, iy, iz, source, name, value = row
            if sid != current_id:
                flush()
                current_id = sid
                ids = []
                values = []
            ids.append(FeatureId(view, (int(ix), int(iy), int(iz)), source, name))
            values.append(float(value))
    flush()
    for sid, fv in out:
        if fv.values.size != expected:
            raise ValueError(f"subject {sid} has {fv.values.size} features, expected {expected}")
    return out
