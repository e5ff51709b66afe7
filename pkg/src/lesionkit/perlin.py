"""Classic 3D gradient (Perlin) noise with quintic fade.

Gradients are the 12 cube-edge directions; the permutation table is a
seeded shuffle of 0..255, so every value is deterministic given
(seed, point, frequency). Output is zero on lattice points and stays
within [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# 12 edge directions of the cube, as in improved gradient noise
GRADIENTS = np.array(
    [
        [1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0],
        [1, 0, 1], [-1, 0, 1], [1, 0, -1], [-1, 0, -1],
        [0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class PerlinTable:
    """Seeded permutation table driving the gradient hash."""

    seed: int
    perm: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        p = rng.permutation(256).astype(np.int64)
        doubled = np.concatenate([p, p])
        doubled.setflags(write=False)
        object.__setattr__(self, "perm", doubled)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin3(table: PerlinTable, p, frequency: float = 1.0) -> np.ndarray | float:
    """Evaluate noise at point(s) ``p`` scaled by ``frequency``.

    ``p`` may be a single 3-vector or an (..., 3) array; returns a scalar
    or an array of the leading shape.
    """
    if frequency <= 0:
        raise ValueError(f"frequency must be > 0, got {frequency}")
    pts = np.asarray(p, dtype=np.float64)
    scalar_input = pts.ndim == 1
    pts = np.atleast_2d(pts) * frequency
    lead_shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)

    cell = np.floor(pts)
    f = pts - cell
    ci = cell.astype(np.int64) & 255
    u, v, w = _fade(f[:, 0]), _fade(f[:, 1]), _fade(f[:, 2])

    perm = table.perm
    result = np.zeros(pts.shape[0])
    # accumulate the trilinear blend of the 8 corner gradient dot products
    for dx in (0, 1):
        wx = u if dx else 1.0 - u
        px = perm[(ci[:, 0] + dx) & 255]
        for dy in (0, 1):
            wy = v if dy else 1.0 - v
            py = perm[px + ((ci[:, 1] + dy) & 255)]
            for dz in (0, 1):
                wz = w if dz else 1.0 - w
                h = perm[py + ((ci[:, 2] + dz) & 255)] % 12
                g = GRADIENTS[h]
                dot = (
                    g[:, 0] * (f[:, 0] - dx)
                    + g[:, 1] * (f[:, 1] - dy)
                    + g[:, 2] * (f[:, 2] - dz)
                )
                result += wx * wy * wz * dot

    result = result.reshape(lead_shape)
    if scalar_input:
        return float(result[0])
    return result
