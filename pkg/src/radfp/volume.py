"""Dense 3-D scalar volumes: bit-exact RVOL I/O, trilinear resampling, grid partitioning, box masks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"RVL1"
_HEADER = struct.Struct("<4sIII")
# 8 GiB of float32 payload; any header claiming more is corrupt.
_MAX_VOXELS = 2**31


class VolumeFormatError(ValueError):
    """An RVOL file violates the on-disk format contract."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense scalar grid indexed [z, y, x]; float64 in memory, float32 on disk."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"volume dims must all be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.data.shape
        return (d, h, w)

    @property
    def n_voxels(self) -> int:
        return self.data.size


def read_volume(path) -> Volume:
    """Read an RVOL file.

    Layout: bytes 0-3 magic ``RVL1``; bytes 4-15 depth/height/width as
    little-endian uint32; then depth*height*width little-endian float32
    voxels, z slowest and x fastest.  No padding, no trailer.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"truncated header: file has {len(raw)} bytes, need {_HEADER.size}")
    magic, depth, height, width = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    for name, value in (("depth", depth), ("height", height), ("width", width)):
        if value == 0:
            raise VolumeFormatError(f"{name} must be >= 1, got 0")
    count = depth * height * width
    if count > _MAX_VOXELS:
        raise VolumeFormatError(
            f"dims product overflow: depth*height*width = {depth}x{height}x{width} exceeds {_MAX_VOXELS}"
        )
    payload = raw[_HEADER.size:]
    expected = 4 * count
    if len(payload) < expected:
        raise VolumeFormatError(f"truncated payload: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise VolumeFormatError(f"trailing bytes after payload: {len(payload)} bytes, expected {expected}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(depth, height, width)
    if not np.isfinite(voxels).all():
        raise VolumeFormatError("payload contains non-finite voxels")
    return Volume(voxels.astype(np.float64))


def write_volume(v: Volume, path) -> None:
    """Write an RVOL file; exact inverse of read_volume for float32-representable data."""
    d, h, w = v.dims
    header = _HEADER.pack(_MAGIC, d, h, w)
    Path(path).write_bytes(header + v.data.astype("<f4").tobytes())


def _axis_positions(n_in: int, n_out: int):
    # Cell-center mapping: output voxel i samples input coordinate
    # (i + 0.5) * n_in / n_out - 0.5, clamped to the valid range.
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    i0 = np.clip(lo.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(lo.astype(np.int64) + 1, 0, n_in - 1)
    return i0, i1, frac


def resample_trilinear(v: Volume, target) -> Volume:
    """Resample to target dims with trilinear interpolation (align-corners-false)."""
    tgt = tuple(int(t) for t in target)
    if len(tgt) != 3 or any(t < 1 for t in tgt):
        raise ValueError(f"target dims must be three integers >= 1, got {target!r}")
    out = v.data
    for axis in range(3):
        i0, i1, frac = _axis_positions(out.shape[axis], tgt[axis])
        a = np.take(out, i0, axis=axis)
        b = np.take(out, i1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = tgt[axis]
        f = frac.reshape(shape)
        out = a * (1.0 - f) + b * f
    return Volume(out)


@dataclass(frozen=True)
class BoxMask:
    """Axis-aligned box of voxels given by integer origin (z, y, x) and extent."""

    origin: tuple[int, int, int]
    extent: tuple[int, int, int]

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.extent) != 3:
            raise ValueError("origin and extent must be 3-tuples")
        if any(o < 0 for o in self.origin):
            raise ValueError(f"origin must be non-negative, got {self.origin}")
        if any(e < 1 for e in self.extent):
            raise ValueError(f"extent must be >= 1 per axis, got {self.extent}")

    def check_fits(self, dims) -> None:
        for o, e, d in zip(self.origin, self.extent, dims):
            if o + e > d:
                raise ValueError(f"mask origin {self.origin} + extent {self.extent} exceeds dims {tuple(dims)}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + e) for o, e in zip(self.origin, self.extent))

    def to_array(self, dims) -> np.ndarray:
        """Boolean voxel mask, True inside the box."""
        self.check_fits(dims)
        arr = np.zeros(tuple(dims), dtype=bool)
        arr[self.slices()] = True
        return arr


@dataclass(frozen=True, eq=False)
class Subpatch:
    """One cell of a regular grid partition; index is (ix, iy, iz)."""

    index: tuple[int, int, int]
    box: BoxMask
    data: Volume


def _axis_bounds(dim: int, n: int) -> list[tuple[int, int]]:
    # Remainder voxels go to the leading patches.
    base, rem = divmod(dim, n)
    bounds = []
    start = 0
    for i in range(n):
        size = base + (1 if i < rem else 0)
        bounds.append((start, size))
        start += size
    return bounds


def partition_grid(v: Volume, n: int) -> list[Subpatch]:
    """Split a volume into n^3 non-overlapping subpatches in (iz, iy, ix) lexicographic order."""
    n = int(n)
    if n < 1:
        raise ValueError(f"grid n must be >= 1, got {n}")
    d, h, w = v.dims
    if n > min(d, h, w):
        raise ValueError(f"invalid grid: n={n} exceeds volume dims {v.dims}")
    zb = _axis_bounds(d, n)
    yb = _axis_bounds(h, n)
    xb = _axis_bounds(w, n)
    patches = []
    for iz in range(n):
        z0, dz = zb[iz]
        for iy in range(n):
            y0, dy = yb[iy]
            for ix in range(n):
                x0, dx = xb[ix]
                box = BoxMask((z0, y0, x0), (dz, dy, dx))
                patch = Volume(v.data[z0:z0 + dz, y0:y0 + dy, x0:x0 + dx].copy())
                patches.append(Subpatch((ix, iy, iz), box, patch))
    return patches


def central_mask(dims, fractions) -> BoxMask:
    """Centered box covering the given fraction of each axis.

    Extent is round-half-up of fraction*dim, clamped to [1, dim]; the origin
    centers the box with floor division of the margin.
    """
    if len(dims) != 3 or len(fractions) != 3:
        raise ValueError("dims and fractions must be 3-tuples")
    origin = []
    extent = []
    for d, f in zip(dims, fractions):
        if not (0.0 < f <= 1.0):
            raise ValueError(f"fractions must lie in (0, 1], got {fractions}")
        e = int(np.floor(f * d + 0.5))
        e = max(1, min(int(d), e))
        origin.append((int(d) - e) // 2)
        extent.append(e)
    return BoxMask(tuple(origin), tuple(extent))


def apply_mask_zero(v: Volume, m: BoxMask) -> Volume:
    """Zero the voxels inside the mask, leaving everything else bit-identical."""
    m.check_fits(v.dims)
    out = v.data.copy()
    out[m.slices()] = 0.0
    return Volume(out)
