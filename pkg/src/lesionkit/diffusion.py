"""Denoising-diffusion machinery and inpainting.

The mask convention throughout is m = 1 on the region to inpaint; known
voxels (m = 0) are never altered by inpainting, bitwise. All Gaussian
draws come from a counter-based generator keyed by (seed, timestep,
stream), so outputs are bit-reproducible for a given seed regardless of
call interleaving.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Mask, ScalarVolume, VolumeError


class DiffusionError(ValueError):
    """Raised for invalid diffusion arguments or failed solves."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise coefficients: beta_t, alpha_t = 1 - beta_t, and the
    running product alpha_bar_t, for t = 1..T (arrays are 0-indexed)."""

    T: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(self.beta) != self.T:
            raise DiffusionError("schedule arrays must have length T")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise DiffusionError("all beta must be in (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.alpha_bar) < 0):
            raise DiffusionError("alpha_bar must be strictly decreasing")

    def abar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bar[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule with a stable cumulative product for alpha_bar."""
    if not 1 <= T <= 10000:
        raise DiffusionError(f"T must be in 1..10000, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise DiffusionError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.exp(np.cumsum(np.log(alpha)))
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def keyed_normal(shape, seed: int, t: int, stream: int) -> np.ndarray:
    """Standard-normal field from a Philox generator keyed (seed, t, stream)."""
    key = np.array(
        [np.uint64(seed % (2**64)), np.uint64((t << 16) | (stream & 0xFFFF))],
        dtype=np.uint64,
    )
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(shape)


def forward_noise(x0: ScalarVolume, t: int, eps: ScalarVolume, sched: NoiseSchedule) -> ScalarVolume:
    """Closed-form forward corruption x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    if x0.geometry.dims != eps.geometry.dims:
        raise DiffusionError("x0 and eps geometry mismatch")
    abar = sched.abar(t)
    return x0.with_data(np.sqrt(abar) * x0.data + np.sqrt(1.0 - abar) * eps.data)


def masked_forward(x0: ScalarVolume, x_t: ScalarVolume, m: Mask) -> ScalarVolume:
    """Noisy values inside the mask, clean x0 outside: x_t*m + x0*(1-m)."""
    if x0.geometry.dims != x_t.geometry.dims or x0.geometry.dims != m.geometry.dims:
        raise DiffusionError("masked_forward geometry mismatch")
    return x0.with_data(np.where(m.data, x_t.data, x0.data))


class Denoiser:
    """Contract for noise predictors: pure function of (x_t, t, mask)."""

    def predict(self, x_t: ScalarVolume, t: int, m: Mask | None = None) -> ScalarVolume:
        raise NotImplementedError


class GaussianAnalyticDenoiser(Denoiser):
    """Exact noise predictor for a voxelwise Gaussian prior x0 ~ N(mu, var).

    The conjugate posterior mean E[x0 | x_t] is closed-form, which makes
    this an oracle for testing samplers without any learned model.
    """

    def __init__(self, schedule: NoiseSchedule, mu: ScalarVolume, var: float):
        if var <= 0:
            raise DiffusionError(f"var must be > 0, got {var}")
        self.schedule = schedule
        self.mu = mu
        self.var = float(var)

    def predict(self, x_t: ScalarVolume, t: int, m: Mask | None = None) -> ScalarVolume:
        abar = self.schedule.abar(t)
        post_mean = (
            np.sqrt(abar) * self.var * x_t.data + (1.0 - abar) * self.mu.data
        ) / (abar * self.var + (1.0 - abar))
        eps_hat = (x_t.data - np.sqrt(abar) * post_mean) / np.sqrt(1.0 - abar)
        return x_t.with_data(eps_hat)


class NeighborhoodDenoiser(Denoiser):
    """Learning-free denoiser that takes a local box mean as the x0 estimate.

    Useful only as cheap pipeline plumbing; with x0_est = boxmean(x_t)/sqrt(abar)
    the predicted noise reduces to (x_t - boxmean(x_t)) / sqrt(1 - abar).
    """

    def __init__(self, schedule: NoiseSchedule, radius: int = 2):
        if radius < 1:
            raise DiffusionError(f"radius must be >= 1, got {radius}")
        self.schedule = schedule
        self.radius = int(radius)

    def predict(self, x_t: ScalarVolume, t: int, m: Mask | None = None) -> ScalarVolume:
        abar = self.schedule.abar(t)
        size = 2 * self.radius + 1
        if all(size >= d for d in x_t.geometry.dims):
            box = np.full_like(x_t.data, x_t.data.mean())
        else:
            box = ndimage.uniform_filter(x_t.data, size=size, mode="nearest")
        eps_hat = (x_t.data - box) / np.sqrt(1.0 - abar)
        return x_t.with_data(eps_hat)


def reverse_step(
    x_t: ScalarVolume,
    t: int,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    z: ScalarVolume | None = None,
    m: Mask | None = None,
) -> ScalarVolume:
    """One reverse update x_t -> x_{t-1}.

    Mean update 1/sqrt(alpha_t) * (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat);
    the stochastic term sqrt(beta_t) * z is added only when z is given and
    t > 1. Passing z = None gives the deterministic mean-only variant.
    """
    if not 1 <= t <= sched.T:
        raise DiffusionError(f"timestep {t} outside 1..{sched.T}")
    eps_hat = denoiser.predict(x_t, t, m)
    alpha = float(sched.alpha[t - 1])
    abar = sched.abar(t)
    mean = (x_t.data - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat.data) / np.sqrt(alpha)
    if z is not None and t > 1:
        mean = mean + np.sqrt(float(sched.beta[t - 1])) * z.data
    return x_t.with_data(mean)


class InpaintMode(enum.Enum):
    # paste clean known data outside the mask at every step
    PAPER_CLEAN_KNOWN = "paper_clean_known"
    # paste forward-noised known data (RePaint-style), clean only at the end
    REPAINT_NOISED_KNOWN = "repaint_noised_known"


@dataclass(frozen=True)
class InpaintConfig:
    mode: InpaintMode = InpaintMode.PAPER_CLEAN_KNOWN
    schedule: NoiseSchedule = None
    seed: int = 0
    resample_jumps: int = 0

    def __post_init__(self):
        if self.schedule is None:
            object.__setattr__(self, "schedule", make_schedule(50))
        if self.resample_jumps < 0:
            raise DiffusionError("resample_jumps must be >= 0")


def inpaint_sample(
    x0_known: ScalarVolume,
    m: Mask,
    denoiser: Denoiser,
    cfg: InpaintConfig,
) -> ScalarVolume:
    """Reverse-process inpainting of the masked region.

    Starts from pure noise, runs the reverse chain from T to 1, and after
    each step restores the known region: clean x0 in PAPER_CLEAN_KNOWN
    mode, forward-noised x0 at the matching step in REPAINT_NOISED_KNOWN
    mode. Output voxels outside the mask equal x0_known bitwise.
    """
    if m.is_empty():
        raise DiffusionError("inpaint mask is empty")
    if x0_known.geometry.dims != m.geometry.dims:
        raise DiffusionError("inpaint geometry mismatch")
    sched = cfg.schedule
    seed = cfg.seed
    dims = x0_known.geometry.dims
    known = ~m.data

    x = keyed_normal(dims, seed, sched.T + 1, 0)
    repaint = cfg.mode is InpaintMode.REPAINT_NOISED_KNOWN
    jumps = cfg.resample_jumps if repaint else 0
    for t in range(sched.T, 0, -1):
        for j in range(jumps + 1):
            z = None
            if t > 1:
                z = x0_known.with_data(keyed_normal(dims, seed, t, 1 + 4 * j))
            x_vol = reverse_step(x0_known.with_data(x), t, denoiser, sched, z, m)
            x = np.array(x_vol.data)
            if t > 1:
                if repaint:
                    eps = x0_known.with_data(keyed_normal(dims, seed, t, 2 + 4 * j))
                    noised = forward_noise(x0_known, t - 1, eps, sched)
                    x[known] = noised.data[known]
                else:
                    x[known] = x0_known.data[known]
            if j < jumps and t > 1:
                # diffuse one step back up before resampling this step
                beta = float(sched.beta[t - 1])
                eps = keyed_normal(dims, seed, t, 3 + 4 * j)
                x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * eps
    x[known] = x0_known.data[known]
    return x0_known.with_data(x)


def harmonic_inpaint(
    vol: ScalarVolume,
    m: Mask,
    tol: float = 1e-6,
    max_iter: int = 20000,
) -> ScalarVolume:
    """Deterministic fallback inpainter: Laplace solve inside the mask.

    Gauss-Seidel (red-black) iteration on the 6-neighbor Laplacian with
    Dirichlet data from the mask complement and zero-flux grid faces.
    Every iterate is a neighbor average, so the discrete maximum principle
    holds throughout. Raises on non-convergence, carrying the residual.
    """
    if m.is_empty():
        raise DiffusionError("harmonic_inpaint mask is empty")
    inside = m.data
    if inside.all():
        raise DiffusionError("harmonic_inpaint mask complement is empty")
    if vol.geometry.dims != m.geometry.dims:
        raise DiffusionError("harmonic_inpaint geometry mismatch")

    f = np.array(vol.data)
    f[inside] = f[~inside].mean()
    grids = np.indices(vol.geometry.dims).sum(axis=0)
    red = inside & (grids % 2 == 0)
    black = inside & (grids % 2 == 1)

    def neighbor_mean(arr):
        p = np.pad(arr, 1, mode="edge")
        s = (
            p[2:, 1:-1, 1:-1] + p[:-2, 1:-1, 1:-1]
            + p[1:-1, 2:, 1:-1] + p[1:-1, :-2, 1:-1]
            + p[1:-1, 1:-1, 2:] + p[1:-1, 1:-1, :-2]
        )
        return s / 6.0

    residual = np.inf
    nm = neighbor_mean(f)
    for _ in range(max_iter):
        f[red] = nm[red]
        nm = neighbor_mean(f)
        f[black] = nm[black]
        nm = neighbor_mean(f)  # reused for the next red half-sweep
        residual = float(np.abs(6.0 * (nm[inside] - f[inside])).max())
        if residual <= tol:
            return vol.with_data(f)
    raise DiffusionError(
        f"harmonic_inpaint did not converge in {max_iter} iterations "
        f"(residual {residual:.3g} > tol {tol:.3g})"
    )
