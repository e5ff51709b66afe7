"""Velocity and displacement field algebra.

Fields store one 3-vector per voxel in voxel units, shape (nx, ny, nz, 3).
A VELOCITY field lives in the tangent space of diffeomorphisms and is
integrated to a DISPLACEMENT field by scaling-and-squaring. All warping is
backward (pull-back): ``out(x) = img(x + d(x))`` with clamped sampling.
"""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nifti
from .volume import (
    GridGeometry,
    LabelVolume,
    Mask,
    ScalarVolume,
    Volume,
    VolumeError,
    smooth_array,
)


class FieldKind(enum.Enum):
    VELOCITY = "velocity"
    DISPLACEMENT = "displacement"


class Interp(enum.Enum):
    LINEAR = "linear"
    NEAREST = "nearest"


class FieldError(ValueError):
    """Raised for invalid field operations."""


@dataclass(frozen=True)
class VectorField:
    geometry: GridGeometry
    kind: FieldKind
    data: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.shape != self.geometry.dims + (3,):
            raise FieldError(
                f"field shape {arr.shape} does not match dims {self.geometry.dims}"
            )
        if not np.all(np.isfinite(arr)):
            raise FieldError("field contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def with_data(self, data: np.ndarray, kind: FieldKind | None = None) -> "VectorField":
        return VectorField(self.geometry, kind or self.kind, data)

    def max_norm(self) -> float:
        return float(np.sqrt((self.data**2).sum(axis=-1)).max())


def zero_field(geometry: GridGeometry, kind: FieldKind = FieldKind.DISPLACEMENT) -> VectorField:
    return VectorField(geometry, kind, np.zeros(geometry.dims + (3,)))


JacobianMap = ScalarVolume  # determinant of the deformation map, 1 = no volume change


@functools.lru_cache(maxsize=16)
def _identity_grid(dims: tuple[int, int, int]) -> np.ndarray:
    grid = np.indices(dims, dtype=np.float64)
    grid.setflags(write=False)
    return grid


def _sample_coords(disp: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Coordinates x + d(x) as a (3, nx, ny, nz) array for map_coordinates."""
    return _identity_grid(dims) + np.moveaxis(disp, -1, 0)


def _pull_back(data: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    return ndimage.map_coordinates(data, coords, order=order, mode="nearest")


def _check_same_geometry(a, b) -> None:
    if a.geometry.dims != b.geometry.dims:
        raise FieldError(f"geometry mismatch: {a.geometry.dims} vs {b.geometry.dims}")


def compose_arrays(d1: np.ndarray, d2: np.ndarray, dims) -> np.ndarray:
    coords = _sample_coords(d2, dims)
    out = np.empty_like(d2)
    for c in range(3):
        out[..., c] = d2[..., c] + _pull_back(d1[..., c], coords, order=1)
    return out


def compose(d1: VectorField, d2: VectorField) -> VectorField:
    """Displacement of applying d2 then d1: (d1 o d2)(x) = d2(x) + d1(x + d2(x))."""
    _check_same_geometry(d1, d2)
    if d1.kind is not FieldKind.DISPLACEMENT or d2.kind is not FieldKind.DISPLACEMENT:
        raise FieldError("compose expects displacement fields")
    out = compose_arrays(d1.data, d2.data, d1.geometry.dims)
    return VectorField(d1.geometry, FieldKind.DISPLACEMENT, out)


def exp_velocity(v: VectorField, steps: int = 6) -> VectorField:
    """Integrate a stationary velocity field by scaling-and-squaring."""
    if v.kind is not FieldKind.VELOCITY:
        raise FieldError("exp_velocity expects a VELOCITY field")
    if steps < 1:
        raise FieldError(f"steps must be >= 1, got {steps}")
    u = v.data / float(2**steps)
    dims = v.geometry.dims
    for _ in range(steps):
        u = compose_arrays(u, u, dims)
    return VectorField(v.geometry, FieldKind.DISPLACEMENT, u)


def invert(f: VectorField, max_iter: int = 50, tol: float = 1e-3) -> VectorField:
    """Inverse deformation as a displacement field.

    Velocity fields invert exactly via exp(-v). Displacement fields use the
    fixed-point iteration u_inv(x) <- -u(x + u_inv(x)), which requires the
    field to be small enough to contract; growth of the update norm over 5
    consecutive iterations raises an error.
    """
    if f.kind is FieldKind.VELOCITY:
        return exp_velocity(f.with_data(-f.data))
    dims = f.geometry.dims
    u = f.data
    inv = -u
    prev_update = np.inf
    growth_streak = 0
    for _ in range(max_iter):
        coords = _sample_coords(inv, dims)
        new = np.empty_like(inv)
        for c in range(3):
            new[..., c] = -_pull_back(u[..., c], coords, order=1)
        update = float(np.sqrt(((new - inv) ** 2).sum(axis=-1)).max())
        inv = new
        if update < tol:
            break
        if update > prev_update:
            growth_streak += 1
            if growth_streak >= 5:
                raise FieldError(
                    f"displacement inversion diverged (update {update:.3g})"
                )
        else:
            growth_streak = 0
        prev_update = update
    return VectorField(f.geometry, FieldKind.DISPLACEMENT, inv)


def warp(vol: Volume, d: VectorField, interp: Interp = Interp.LINEAR) -> Volume:
    """Pull-back warp: out(x) = vol(x + d(x)), clamped sampling.

    LabelVolume and Mask inputs require NEAREST interpolation.
    """
    _check_same_geometry(vol, d)
    if d.kind is not FieldKind.DISPLACEMENT:
        raise FieldError("warp expects a DISPLACEMENT field")
    if isinstance(vol, (LabelVolume, Mask)):
        if interp is Interp.LINEAR:
            raise FieldError("LINEAR interpolation is invalid for labels and masks")
        interp = Interp.NEAREST
    if not d.data.any():
        return vol
    coords = _sample_coords(d.data, vol.geometry.dims)
    if isinstance(vol, Mask):
        out = _pull_back(vol.data.astype(np.uint8), coords, order=0)
        return vol.with_data(out != 0)
    order = 1 if interp is Interp.LINEAR else 0
    out = _pull_back(np.asarray(vol.data, dtype=np.float64), coords, order=order)
    if isinstance(vol, LabelVolume):
        return vol.with_data(np.rint(out).astype(np.int32))
    return vol.with_data(out)


def _pad_interior(interior: np.ndarray) -> np.ndarray:
    """Edge-replicate an interior-of-grid array back to full grid size."""
    return np.pad(interior, 1, mode="edge")


def _interior_gradients(data_comp: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central differences of one component restricted to the interior."""
    c = data_comp
    gx = 0.5 * (c[2:, 1:-1, 1:-1] - c[:-2, 1:-1, 1:-1])
    gy = 0.5 * (c[1:-1, 2:, 1:-1] - c[1:-1, :-2, 1:-1])
    gz = 0.5 * (c[1:-1, 1:-1, 2:] - c[1:-1, 1:-1, :-2])
    return gx, gy, gz


def jacobian_determinant(d: VectorField) -> JacobianMap:
    """det(I + grad d): local volume ratio of the deformation x + d(x).

    Central differences at interior voxels; face voxels copy the nearest
    interior value so boundary stencils do not pollute the statistics.
    """
    if d.kind is not FieldKind.DISPLACEMENT:
        raise FieldError("jacobian_determinant expects a DISPLACEMENT field")
    if any(n < 3 for n in d.geometry.dims):
        raise FieldError("jacobian_determinant needs dims >= 3 per axis")
    J = np.empty(tuple(n - 2 for n in d.geometry.dims) + (3, 3))
    for c in range(3):
        gx, gy, gz = _interior_gradients(d.data[..., c])
        J[..., c, 0] = gx
        J[..., c, 1] = gy
        J[..., c, 2] = gz
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0
    J[..., 2, 2] += 1.0
    det = (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )
    return ScalarVolume(d.geometry, _pad_interior(det))


def divergence_interior(f: VectorField) -> np.ndarray:
    """Central-difference divergence on the interior voxels only."""
    if any(n < 3 for n in f.geometry.dims):
        raise FieldError("divergence needs dims >= 3 per axis")
    gx, _, _ = _interior_gradients(f.data[..., 0])
    _, gy, _ = _interior_gradients(f.data[..., 1])
    _, _, gz = _interior_gradients(f.data[..., 2])
    return gx + gy + gz


def divergence(f: VectorField) -> ScalarVolume:
    """Divergence volume; face voxels copy the nearest interior value."""
    return ScalarVolume(f.geometry, _pad_interior(divergence_interior(f)))


def _second_differences(c: np.ndarray) -> list[tuple[float, np.ndarray]]:
    """(weight, interior second derivative) pairs of the bending stencil."""
    dxx = c[2:, 1:-1, 1:-1] - 2.0 * c[1:-1, 1:-1, 1:-1] + c[:-2, 1:-1, 1:-1]
    dyy = c[1:-1, 2:, 1:-1] - 2.0 * c[1:-1, 1:-1, 1:-1] + c[1:-1, :-2, 1:-1]
    dzz = c[1:-1, 1:-1, 2:] - 2.0 * c[1:-1, 1:-1, 1:-1] + c[1:-1, 1:-1, :-2]
    dxy = 0.25 * (c[2:, 2:, 1:-1] - c[2:, :-2, 1:-1] - c[:-2, 2:, 1:-1] + c[:-2, :-2, 1:-1])
    dxz = 0.25 * (c[2:, 1:-1, 2:] - c[2:, 1:-1, :-2] - c[:-2, 1:-1, 2:] + c[:-2, 1:-1, :-2])
    dyz = 0.25 * (c[1:-1, 2:, 2:] - c[1:-1, 2:, :-2] - c[1:-1, :-2, 2:] + c[1:-1, :-2, :-2])
    return [(1.0, dxx), (1.0, dyy), (1.0, dzz), (2.0, dxy), (2.0, dxz), (2.0, dyz)]


def bending_energy(f: VectorField) -> float:
    """Mean squared second derivatives over interior voxels and components.

    Mixed partials counted twice (thin-plate discretization). Exactly zero
    on constant and affine fields.
    """
    if any(n < 4 for n in f.geometry.dims):
        raise FieldError("bending_energy needs dims >= 4 per axis")
    n_int = np.prod([n - 2 for n in f.geometry.dims])
    total = 0.0
    for c in range(3):
        for w, d2 in _second_differences(f.data[..., c]):
            total += w * float((d2**2).sum())
    return total / float(n_int)


def smooth_field(f: VectorField, sigma: float) -> VectorField:
    """Componentwise Gaussian smoothing; kind preserved."""
    if sigma < 0:
        raise FieldError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return f
    out = np.empty_like(f.data)
    for c in range(3):
        out[..., c] = smooth_array(f.data[..., c], sigma)
    return f.with_data(out)


def save_field(f: VectorField, prefix, steps: int | None = None) -> None:
    """Persist as three scalar NIfTIs (_dx/_dy/_dz) plus a JSON sidecar."""
    prefix = Path(prefix)
    for c, suffix in enumerate(("_dx.nii", "_dy.nii", "_dz.nii")):
        comp = ScalarVolume(f.geometry, np.ascontiguousarray(f.data[..., c]))
        nifti.write_nifti(comp, prefix.parent / (prefix.name + suffix))
    meta = {"kind": f.kind.value, "steps": steps}
    (prefix.parent / (prefix.name + ".json")).write_text(json.dumps(meta, indent=2))


def load_field(prefix) -> VectorField:
    prefix = Path(prefix)
    meta = json.loads((prefix.parent / (prefix.name + ".json")).read_text())
    comps = []
    for suffix in ("_dx.nii", "_dy.nii", "_dz.nii"):
        vol = nifti.read_nifti(prefix.parent / (prefix.name + suffix))
        if not isinstance(vol, ScalarVolume):
            raise FieldError(f"field component {suffix} is not a scalar volume")
        comps.append(vol)
    data = np.stack([v.data for v in comps], axis=-1)
    return VectorField(comps[0].geometry, FieldKind(meta["kind"]), data)
