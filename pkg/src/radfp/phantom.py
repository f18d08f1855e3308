"""Synthetic labeled knee-like phantoms: smooth healthy volumes with plantable lesions.

Each subject has three views.  An "acl"-style lesion is a heterogeneous
high-entropy blob planted in a designated patch of the sagittal view; a
"men"-style lesion is a thin bright plane in a designated patch of the
coronal view.  The abn label is the union of the per-lesion labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import VIEWS, SubjectRecord
from .volume import Volume, partition_grid, resample_trilinear

LESION_ACL = "acl"
LESION_MEN = "men"
ACL_VIEW = "sagittal"
MEN_VIEW = "coronal"


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (16, 32, 32)
    grid_n: int = 2
    acl_prob: float = 0.45
    men_prob: float = 0.45
    base_range: tuple[float, float] = (0.35, 0.65)
    noise_sigma: float = 0.02
    acl_amplitude: float = 0.35
    men_amplitude: float = 0.7
    # Patch indices (ix, iy, iz); None picks a default corner of the grid.
    acl_patch: tuple[int, int, int] | None = None
    men_patch: tuple[int, int, int] | None = None

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ValueError(f"phantom dims must be >= 4 per axis, got {self.dims}")
        if not (1 <= self.grid_n <= min(self.dims)):
            raise ValueError(f"grid_n {self.grid_n} does not fit dims {self.dims}")
        for name, p in (("acl_prob", self.acl_prob), ("men_prob", self.men_prob)):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.base_range
        if not (lo < hi):
            raise ValueError(f"base_range must be increasing, got {self.base_range}")
        for patch in (self.resolved_acl_patch(), self.resolved_men_patch()):
            if any(not (0 <= i < self.grid_n) for i in patch):
                raise ValueError(f"lesion patch {patch} outside grid n={self.grid_n}")

    def resolved_acl_patch(self) -> tuple[int, int, int]:
        if self.acl_patch is not None:
            return tuple(self.acl_patch)
        n = self.grid_n
        return (n - 1, n - 1, n - 1)

    def resolved_men_patch(self) -> tuple[int, int, int]:
        if self.men_patch is not None:
            return tuple(self.men_patch)
        n = self.grid_n
        return (0, n - 1, 0)


@dataclass
class SyntheticSubject:
    views: dict[str, Volume]
    labels: dict[str, bool]
    lesion_spec: dict[str, list[tuple[tuple[int, int, int], str]]]
    seed: int

    def to_record(self, subject_id: str) -> SubjectRecord:
        return SubjectRecord(subject_id, dict(self.views), dict(self.labels))


def _healthy_view(rng: np.random.Generator, config: PhantomConfig) -> np.ndarray:
    d, h, w = config.dims
    coarse_dims = (max(2, d // 8), max(2, h // 8), max(2, w // 8))
    lo, hi = config.base_range
    coarse = rng.uniform(lo, hi, size=coarse_dims)
    smooth = resample_trilinear(Volume(coarse), config.dims).data
    return smooth + rng.normal(0.0, config.noise_sigma, size=config.dims)


def _patch_box(config: PhantomConfig, view_dims, index):
    ix, iy, iz = index
    probe = partition_grid(Volume(np.zeros(view_dims)), config.grid_n)
    for patch in probe:
        if patch.index == (ix, iy, iz):
            return patch.box
    raise ValueError(f"patch index {index} outside grid n={config.grid_n}")


def _plant_acl(rng: np.random.Generator, arr: np.ndarray, box, amplitude: float) -> None:
    # Heterogeneous ellipsoidal blob; working on the box slice confines it by construction.
    sub = arr[box.slices()]
    extent = np.array(box.extent, dtype=float)
    center = extent / 2.0 + rng.integers(-1, 2, size=3)
    radii = np.maximum(1.0, extent * 0.3 * (1.0 + rng.uniform(-0.15, 0.15, size=3)))
    zz, yy, xx = np.meshgrid(*[np.arange(s) for s in sub.shape], indexing="ij")
    dist = (((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2)
    inside = dist <= 1.0
    n = int(inside.sum())
    sub[inside] += amplitude * rng.uniform(-1.0, 1.0, size=n) + 0.4 * amplitude


def _plant_men(rng: np.random.Generator, arr: np.ndarray, box, amplitude: float) -> None:
    # Thin bright plane spanning the central part of the patch.
    (z0, y0, x0), (dz, dy, dx) = box.origin, box.extent
    zc = z0 + dz // 2 + int(rng.integers(-1, 2))
    zc = min(max(zc, z0), z0 + dz - 1)
    ym = max(1, round(0.15 * dy))
    xm = max(1, round(0.15 * dx))
    sl = (zc, slice(y0 + ym, y0 + dy - ym), slice(x0 + xm, x0 + dx - xm))
    arr[sl] += amplitude * (1.0 + rng.uniform(-0.07, 0.07, size=arr[sl].shape))


def gen_phantom(seed: int, config: PhantomConfig) -> SyntheticSubject:
    """Deterministically generate one synthetic subject from (seed, config)."""
    rng = np.random.default_rng(seed)
    acl = bool(rng.random() < config.acl_prob)
    men = bool(rng.random() < config.men_prob)
    labels = {"abn": acl or men, "acl": acl, "men": men}
    views = {}
    lesion_spec = {view: [] for view in VIEWS}
    for view in VIEWS:
        arr = _healthy_view(rng, config)
        if view == ACL_VIEW and acl:
            patch = config.resolved_acl_patch()
            _plant_acl(rng, arr, _patch_box(config, config.dims, patch), config.acl_amplitude)
            lesion_spec[view].append((patch, LESION_ACL))
        if view == MEN_VIEW and men:
            patch = config.resolved_men_patch()
            _plant_men(rng, arr, _patch_box(config, config.dims, patch), config.men_amplitude)
            lesion_spec[view].append((patch, LESION_MEN))
        views[view] = Volume(arr)
    return SyntheticSubject(views, labels, lesion_spec, int(seed))


def subject_seed(master_seed: int, index: int) -> int:
    """Stable per-subject seed derived from the dataset master seed."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1)[0])


def gen_cohort(master_seed: int, count: int, config: PhantomConfig) -> list[SubjectRecord]:
    """Generate `count` subjects with ids subj00000..; deterministic per master seed."""
    records = []
    for i in range(count):
        subject = gen_phantom(subject_seed(master_seed, i), config)
        records.append(subject.to_record(f"subj{i:05d}"))
    return records
