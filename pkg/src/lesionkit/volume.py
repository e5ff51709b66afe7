"""Core 3D volume types and grid operations.

Volumes are dense 3D grids indexed ``[x, y, z]`` with x varying fastest in
the serialized (NIfTI) byte order. All volume objects are immutable after
construction and every operation here is a pure function, so they are safe
to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class VolumeError(ValueError):
    """Raised for invalid volume construction or operation arguments."""


@dataclass(frozen=True)
class GridGeometry:
    """Voxel grid shape plus physical spacing (mm/voxel) and origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or len(self.spacing) != 3 or len(self.origin) != 3:
            raise VolumeError("geometry fields must have length 3")
        if any(d < 2 for d in self.dims):
            raise VolumeError(f"all dims must be >= 2, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"all spacings must be > 0, got {self.spacing}")

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_data(geometry: GridGeometry, data: np.ndarray, name: str) -> None:
    if data.shape != geometry.dims:
        raise VolumeError(
            f"{name} data shape {data.shape} does not match dims {geometry.dims}"
        )


@dataclass(frozen=True)
class ScalarVolume:
    """Real-valued volume; data is float64, shape == geometry.dims."""

    geometry: GridGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        _check_data(self.geometry, arr, "scalar")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    def with_data(self, data: np.ndarray) -> "ScalarVolume":
        return ScalarVolume(self.geometry, data)


@dataclass(frozen=True)
class LabelVolume:
    """Integer-labeled volume; label 0 is background."""

    geometry: GridGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data))
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise VolumeError("label data must be integral")
            arr = arr.astype(np.int32)
        else:
            arr = arr.astype(np.int32)
        _check_data(self.geometry, arr, "label")
        if arr.min(initial=0) < 0:
            raise VolumeError("labels must be non-negative")
        object.__setattr__(self, "data", _freeze(arr))

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.geometry, data)

    def labels(self) -> np.ndarray:
        return np.unique(self.data)


@dataclass(frozen=True)
class Mask:
    """Boolean volume."""

    geometry: GridGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data).astype(bool))
        _check_data(self.geometry, arr, "mask")
        object.__setattr__(self, "data", _freeze(arr))

    def with_data(self, data: np.ndarray) -> "Mask":
        return Mask(self.geometry, data)

    @property
    def volume(self) -> int:
        return int(np.count_nonzero(self.data))

    def is_empty(self) -> bool:
        return not bool(self.data.any())


Volume = ScalarVolume | LabelVolume | Mask


def sample_trilinear(vol: ScalarVolume, p) -> float:
    """Trilinear interpolation at continuous voxel coordinate ``p``.

    Coordinates outside the grid are clamped to the boundary faces
    (zero-flux extension). Exact on volumes affine in position.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise VolumeError(f"sample point must be a finite 3-vector, got {p!r}")
    return float(sample_trilinear_many(vol, p[None, :])[0])


def sample_trilinear_many(vol: ScalarVolume, pts: np.ndarray) -> np.ndarray:
    """Vectorized trilinear sampling at an (n, 3) array of voxel coords."""
    pts = np.asarray(pts, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise VolumeError("sample points must be finite")
    dims = vol.geometry.dims
    data = vol.data
    out = np.empty(pts.shape[0], dtype=np.float64)
    idx = np.empty((pts.shape[0], 3), dtype=np.intp)
    frac = np.empty_like(pts)
    for ax in range(3):
        c = np.clip(pts[:, ax], 0.0, dims[ax] - 1.0)
        i0 = np.floor(c).astype(np.intp)
        i0 = np.minimum(i0, dims[ax] - 2)
        idx[:, ax] = i0
        frac[:, ax] = c - i0
    x0, y0, z0 = idx[:, 0], idx[:, 1], idx[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    c000 = data[x0, y0, z0]
    c100 = data[x0 + 1, y0, z0]
    c010 = data[x0, y0 + 1, z0]
    c110 = data[x0 + 1, y0 + 1, z0]
    c001 = data[x0, y0, z0 + 1]
    c101 = data[x0 + 1, y0, z0 + 1]
    c011 = data[x0, y0 + 1, z0 + 1]
    c111 = data[x0 + 1, y0 + 1, z0 + 1]
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    out[:] = c0 + fz * (c1 - c0)
    return out


def trilinear_partials(vol: ScalarVolume, pts: np.ndarray) -> np.ndarray:
    """Exact partial derivatives of the trilinear interpolant at (n, 3) coords.

    Returns an (n, 3) array. Where a coordinate is clamped at the grid
    boundary the corresponding partial is 0 (the extension is constant).
    Points exactly on an interior lattice plane use the cell on the
    positive side, which matches one-sided continuity of the interpolant.
    """
    pts = np.asarray(pts, dtype=np.float64)
    dims = vol.geometry.dims
    data = vol.data
    idx = np.empty((pts.shape[0], 3), dtype=np.intp)
    frac = np.empty_like(pts)
    clamped = np.zeros(pts.shape, dtype=bool)
    for ax in range(3):
        clamped[:, ax] = (pts[:, ax] <= 0.0) | (pts[:, ax] >= dims[ax] - 1.0)
        c = np.clip(pts[:, ax], 0.0, dims[ax] - 1.0)
        i0 = np.minimum(np.floor(c).astype(np.intp), dims[ax] - 2)
        idx[:, ax] = i0
        frac[:, ax] = c - i0
    x0, y0, z0 = idx[:, 0], idx[:, 1], idx[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    c = np.empty((pts.shape[0], 2, 2, 2), dtype=np.float64)
    for i in (0, 1):
        for j in (0, 1):
            for k in (0, 1):
                c[:, i, j, k] = data[x0 + i, y0 + j, z0 + k]
    wx = np.stack([1.0 - fx, fx], axis=1)
    wy = np.stack([1.0 - fy, fy], axis=1)
    wz = np.stack([1.0 - fz, fz], axis=1)
    dx_c = c[:, 1] - c[:, 0]                       # (n, 2, 2) over (j, k)
    dy_c = c[:, :, 1] - c[:, :, 0]                 # (n, 2, 2) over (i, k)
    dz_c = c[:, :, :, 1] - c[:, :, :, 0]           # (n, 2, 2) over (i, j)
    gx = np.einsum("nj,nk,njk->n", wy, wz, dx_c)
    gy = np.einsum("ni,nk,nik->n", wx, wz, dy_c)
    gz = np.einsum("ni,nj,nij->n", wx, wy, dz_c)
    grads = np.stack([gx, gy, gz], axis=1)
    grads[clamped] = 0.0
    return grads


def spatial_gradient(vol: ScalarVolume) -> tuple[ScalarVolume, ScalarVolume, ScalarVolume]:
    """Per-axis intensity gradient in intensity-per-voxel units.

    Central differences at interior voxels, one-sided at the grid faces.
    """
    if any(d < 3 for d in vol.geometry.dims):
        raise VolumeError("spatial_gradient needs dims >= 3 per axis")
    gx, gy, gz = np.gradient(vol.data, edge_order=1)
    return (vol.with_data(gx), vol.with_data(gy), vol.with_data(gz))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian kernel truncated at +/- ceil(3*sigma)."""
    if sigma < 0:
        raise VolumeError(f"sigma must be >= 0, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    if sigma == 0 or radius == 0:
        return np.array([1.0])
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def smooth_array(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of a 3D array with clamped boundaries."""
    kernel = gaussian_kernel1d(sigma)
    if kernel.size == 1:
        return np.array(data, dtype=np.float64)
    out = np.asarray(data, dtype=np.float64)
    for ax in range(3):
        out = ndimage.convolve1d(out, kernel, axis=ax, mode="nearest")
    return out


def gaussian_smooth(vol: ScalarVolume, sigma: float) -> ScalarVolume:
    """Gaussian smoothing; sigma = 0 returns the input volume unchanged."""
    if sigma < 0:
        raise VolumeError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return vol
    return vol.with_data(smooth_array(vol.data, sigma))


def histogram_peak_normalize(vol: ScalarVolume, bins: int = 256) -> ScalarVolume:
    """Divide by the center of the most populated nonzero-intensity bin.

    Ties between equally populated bins break toward the higher-intensity
    bin. Brings the dominant tissue intensity to ~1.0.
    """
    if bins < 16:
        raise VolumeError(f"bins must be >= 16, got {bins}")
    nonzero = vol.data[vol.data != 0]
    if nonzero.size == 0:
        raise VolumeError("cannot normalize an all-zero volume")
    if np.unique(nonzero).size < 2:
        raise VolumeError("normalization needs more than one distinct nonzero value")
    counts, edges = np.histogram(nonzero, bins=bins)
    # argmax on the reversed array picks the last (highest) bin among ties
    peak = counts.size - 1 - int(np.argmax(counts[::-1]))
    center = 0.5 * (edges[peak] + edges[peak + 1])
    if center == 0:
        raise VolumeError("histogram peak at zero intensity; cannot normalize")
    return vol.with_data(vol.data / center)
