"""Star-shaped blob meshes and mask geometry.

Blobs start as icosphere subdivisions whose vertices are pushed radially
by Perlin noise; radial-only perturbation keeps the surface star-shaped
about its center, so voxelization reduces to an exact per-direction radius
test (barycentric interpolation of vertex radii on the containing face).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .perlin import PerlinTable, perlin3
from .volume import GridGeometry, Mask, ScalarVolume, VolumeError


class GeometryError(ValueError):
    """Raised for invalid geometric construction arguments."""


@lru_cache(maxsize=8)
def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere: (vertices (V, 3), faces (F, 3)) with V = 10*4^n + 2."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        vlist = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(vlist)
                vlist.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    verts.setflags(write=False)
    faces.setflags(write=False)
    return verts, faces


@dataclass(frozen=True)
class BlobMesh:
    """Star-shaped triangulated surface: center + per-direction radii."""

    center: tuple[float, float, float]
    base_radius: float
    directions: np.ndarray = field(repr=False)  # (V, 3) unit vectors
    radii: np.ndarray = field(repr=False)       # (V,) radius per direction
    faces: np.ndarray = field(repr=False)       # (F, 3) vertex index triples

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if np.any(self.radii <= 0):
            raise GeometryError("all blob radii must be positive")

    @property
    def vertices(self) -> np.ndarray:
        """Vertex positions in voxel coordinates."""
        return np.asarray(self.center) + self.directions * self.radii[:, None]

    def to_json(self, path) -> None:
        payload = {
            "center": list(self.center),
            "base_radius": self.base_radius,
            "directions": self.directions.tolist(),
            "radii": self.radii.tolist(),
            "faces": self.faces.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path) -> "BlobMesh":
        d = json.loads(Path(path).read_text())
        return cls(
            center=tuple(d["center"]),
            base_radius=float(d["base_radius"]),
            directions=np.array(d["directions"]),
            radii=np.array(d["radii"]),
            faces=np.array(d["faces"], dtype=np.int64),
        )


def make_blob_mesh(
    center,
    base_radius: float,
    amplitude: float = 0.3,
    frequency: float = 1.5,
    seed: int = 0,
    subdivisions: int = 3,
) -> BlobMesh:
    """Icosphere blob with radii base_radius * (1 + amplitude * noise)."""
    if not 0 <= amplitude < 1:
        raise GeometryError(f"amplitude must be in [0, 1), got {amplitude}")
    if base_radius < 1:
        raise GeometryError(f"base_radius must be >= 1 voxel, got {base_radius}")
    if not 1 <= subdivisions <= 5:
        raise GeometryError(f"subdivisions must be in 1..5, got {subdivisions}")
    dirs, faces = icosphere(subdivisions)
    noise = perlin3(PerlinTable(seed), dirs, frequency)
    radii = base_radius * (1.0 + amplitude * np.asarray(noise))
    return BlobMesh(tuple(center), float(base_radius), dirs, radii, faces)


def _radius_at_directions(mesh: BlobMesh, dirs: np.ndarray) -> np.ndarray:
    """Interpolated surface radius for unit directions (n, 3).

    Finds the spherical face containing each direction (all barycentric
    coordinates of d = M b non-negative) and blends vertex radii with the
    normalized coordinates.
    """
    tri = mesh.directions[mesh.faces]                # (F, 3, 3) vertex dirs
    mats = np.transpose(tri, (0, 2, 1))              # columns = vertices
    inv = np.linalg.inv(mats)                        # (F, 3, 3)
    tri_radii = mesh.radii[mesh.faces]               # (F, 3)
    out = np.empty(dirs.shape[0])
    chunk = 512
    for start in range(0, dirs.shape[0], chunk):
        d = dirs[start : start + chunk]
        bary = np.einsum("fij,nj->nfi", inv, d)
        score = bary.min(axis=2)                     # (n, F)
        best = score.argmax(axis=1)
        b = bary[np.arange(d.shape[0]), best]
        b = np.maximum(b, 0.0)
        b /= b.sum(axis=1, keepdims=True)
        out[start : start + chunk] = (tri_radii[best] * b).sum(axis=1)
    return out


def voxelize_blob(mesh: BlobMesh, geom: GridGeometry) -> Mask:
    """Mask of voxels with |x - center| <= interpolated radius(direction)."""
    center = np.asarray(mesh.center)
    dims = geom.dims
    if np.any(center < 0) or np.any(center > np.asarray(dims) - 1):
        raise GeometryError(f"mesh center {mesh.center} outside grid {dims}")
    rmax = float(mesh.radii.max())
    rmin = float(mesh.radii.min())
    lo = np.maximum(np.floor(center - rmax).astype(int), 0)
    hi = np.minimum(np.ceil(center + rmax).astype(int), np.asarray(dims) - 1)
    xs, ys, zs = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    box = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    offsets = box - center
    dist = np.linalg.norm(offsets, axis=1)
    inside = dist <= rmin  # strictly inside the minimum radius, no face test needed
    shell = (dist > rmin) & (dist <= rmax)
    if shell.any():
        dirs = offsets[shell] / dist[shell, None]
        r = _radius_at_directions(mesh, dirs)
        inside[shell] = dist[shell] <= r
    mask = np.zeros(dims, dtype=bool)
    sel = box[inside]
    mask[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return Mask(geom, mask)


def signed_distance(mask: Mask) -> ScalarVolume:
    """Signed Euclidean distance in voxel units; negative inside.

    Outside voxels carry the distance to the nearest mask voxel; inside
    voxels carry minus the distance to the outermost inside layer, so
    boundary voxels of the mask sit at 0.
    """
    m = mask.data
    if not m.any():
        raise VolumeError("signed_distance of an empty mask")
    if m.all():
        raise VolumeError("signed_distance of a full mask")
    d_out = ndimage.distance_transform_edt(~m)
    d_in = ndimage.distance_transform_edt(m)
    sdf = d_out - np.maximum(d_in - 1.0, 0.0)
    return ScalarVolume(mask.geometry, sdf)


def random_lesion_mask(
    geom: GridGeometry,
    volume_range: tuple[float, float],
    seed: int,
    region: Mask | None = None,
    margin: float = 3.0,
    amplitude: float = 0.3,
    frequency: float = 1.5,
    subdivisions: int = 3,
    max_rejections: int = 100,
) -> Mask:
    """Rejection-sample a blob mask with voxel volume inside volume_range.

    The blob must lie at least ``margin`` voxels inside ``region`` (or
    inside the grid bounds when no region is given). Deterministic for a
    given seed.
    """
    vmin, vmax = volume_range
    if vmax >= 0.2 * geom.voxel_count:
        raise GeometryError("max volume must be < 20% of the grid volume")
    if vmin > vmax or vmin <= 0:
        raise GeometryError(f"invalid volume range {volume_range}")
    rng = np.random.default_rng(seed)
    dims = np.asarray(geom.dims)
    if region is not None:
        inner = ndimage.distance_transform_edt(region.data) > margin
        centers = np.argwhere(inner)
        if centers.size == 0:
            raise GeometryError("region too small for the requested margin")
        region_sdf = signed_distance(region).data
    for _ in range(max_rejections):
        target = rng.uniform(vmin, vmax)
        base_r = (3.0 * target / (4.0 * np.pi)) ** (1.0 / 3.0)
        if base_r < 1.0:
            base_r = 1.0
        if region is not None:
            center = centers[rng.integers(len(centers))] + rng.uniform(-0.5, 0.5, 3)
        else:
            lo = margin + base_r * (1 + amplitude)
            hi = dims - 1 - lo
            if np.any(hi <= lo):
                continue
            center = rng.uniform(lo, hi)
        mesh = make_blob_mesh(
            center,
            base_r,
            amplitude=amplitude,
            frequency=frequency,
            seed=int(rng.integers(2**31)),
            subdivisions=subdivisions,
        )
        mask = voxelize_blob(mesh, geom)
        vol = mask.volume
        if not vmin <= vol <= vmax or vol == 0:
            continue
        if region is not None:
            if region_sdf[mask.data].max() > -margin:
                continue
        else:
            idx = np.argwhere(mask.data)
            if (idx.min(axis=0) < margin).any() or (idx.max(axis=0) > dims - 1 - margin).any():
                continue
        return mask
    raise GeometryError(
        f"volume range {volume_range} infeasible after {max_rejections} rejections"
    )
