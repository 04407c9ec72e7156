"""Deterministic synthetic tidal-like LR/HR field pairs with land masks.

Water level is a superposition of harmonic constituents whose amplitude and
phase vary smoothly in space; velocities are scaled water-level gradients,
so the three channels are strongly correlated yet structurally distinct.
The LR member of each pair is the block mean of the HR member, standing in
for a coarser numerical-model run rather than an interpolated copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import TidalField, axis_centers, infill_nearest

N_BUMPS = 8
VELOCITY_SCALE = 0.25
DEFAULT_EXTENT = (34.0, 35.0, 125.5, 126.5)
HR_METERS_PER_CELL = 300.0
OMEGA_RANGE = (0.3, 1.2)  # rad per timestep; a 64-step series spans several periods


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    hr_height: int
    hr_width: int
    scale: int
    timesteps: int
    n_constituents: int = 3
    land_fraction_target: float = 0.3
    amplitude: float = 1.0

    def __post_init__(self):
        if self.hr_height < 2 or self.hr_width < 2:
            raise ValueError("HR grid must be at least 2x2")
        if self.scale < 1:
            raise ValueError("scale must be a positive integer")
        if self.hr_height % self.scale or self.hr_width % self.scale:
            raise ValueError(
                f"scale {self.scale} must divide HR grid {self.hr_height}x{self.hr_width}")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.n_constituents < 1:
            raise ValueError("need at least one constituent")
        if not 0.0 <= self.land_fraction_target <= 0.6:
            raise ValueError("land_fraction_target must lie in [0, 0.6]")

    @property
    def lr_height(self) -> int:
        return self.hr_height // self.scale

    @property
    def lr_width(self) -> int:
        return self.hr_width // self.scale


class _BumpSurface:
    """Sum of Gaussian bumps over [-1, 1]^2; evaluable at any coordinates."""

    def __init__(self, rng: np.random.Generator, n_bumps: int,
                 amp_range=(0.3, 1.0), sigma_range=(0.25, 0.55), signed=True):
        self.cy = rng.uniform(-1.0, 1.0, n_bumps)
        self.cx = rng.uniform(-1.0, 1.0, n_bumps)
        self.sigma = rng.uniform(*sigma_range, n_bumps)
        amp = rng.uniform(*amp_range, n_bumps)
        if signed:
            amp *= rng.choice([-1.0, 1.0], n_bumps)
        self.amp = amp

    def __call__(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        out = np.zeros(np.broadcast(yy, xx).shape, dtype=np.float64)
        for a, cy, cx, s in zip(self.amp, self.cy, self.cx, self.sigma):
            out += a * np.exp(-(((yy - cy) ** 2) + ((xx - cx) ** 2)) / (2.0 * s * s))
        return out


def _constituent_params(rng: np.random.Generator, k: int):
    if k == 1:
        omegas = np.array([OMEGA_RANGE[0]])
    else:
        omegas = np.linspace(OMEGA_RANGE[0], OMEGA_RANGE[1], k)
    amps = 1.0 / (1.0 + np.arange(k)) * rng.uniform(0.8, 1.2, k)
    return omegas, amps


def _edge_window(u: np.ndarray) -> np.ndarray:
    """cos^2 taper to zero at the domain boundary."""
    return np.cos(np.pi * u / 2.0) ** 2


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def generate(spec: SynthSpec) -> tuple[TidalField, TidalField]:
    """Build one (lr, hr) pair. Equal specs produce bitwise-equal fields."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.hr_height, spec.hr_width

    bathy = _BumpSurface(rng, N_BUMPS)
    phases = [_BumpSurface(rng, 3, amp_range=(0.4, 1.5), sigma_range=(0.4, 0.9))
              for _ in range(spec.n_constituents)]
    phase_offsets = rng.uniform(0.0, 2.0 * np.pi, spec.n_constituents)
    omegas, amps = _constituent_params(rng, spec.n_constituents)

    ys = axis_centers(h)
    xs = axis_centers(w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    hx = 1.0 / w   # half a cell in normalized units
    hy = 1.0 / h

    def bathymetry(y_s, x_s):
        # Edge taper keeps the basin closed, so gradient fields stay
        # near-zero-mean over the sea region.
        return bathy(y_s, x_s) * _edge_window(y_s) * _edge_window(x_s)

    # Level is evaluated analytically at a 5-point stencil (centre plus
    # half-cell x/y shifts) so velocity differences never touch stored grids.
    stencil = [(yy, xx), (yy, xx + hx), (yy, xx - hx), (yy + hy, xx), (yy - hy, xx)]
    b_s = np.stack([bathymetry(y_s, x_s) for y_s, x_s in stencil])
    b = b_s[0]
    depth = 0.2 + 1.0 / (1.0 + np.exp(-2.0 * b))

    # Sea wherever bathymetry is above its land-fraction quantile.
    threshold = np.quantile(b, spec.land_fraction_target)
    if spec.land_fraction_target > 0.0:
        hr_mask = b >= threshold
    else:
        hr_mask = np.ones((h, w), dtype=bool)

    # Phase modulation tapers to zero at the coastline: the level is then
    # spatially constant along it, which keeps sea-mean velocities small.
    ref = np.quantile(b, min(spec.land_fraction_target + 0.45, 0.95))
    taper = _smoothstep(np.clip((b_s - threshold) / max(ref - threshold, 1e-9), 0.0, 1.0))
    ph_s = np.stack([[p(y_s, x_s) for y_s, x_s in stencil] for p in phases]) * taper[None]

    def eta_stencil(t: int) -> np.ndarray:
        total = np.zeros((len(stencil), h, w), dtype=np.float64)
        for k in range(spec.n_constituents):
            total += (spec.amplitude * amps[k]) * b_s * np.cos(
                omegas[k] * t + ph_s[k] + phase_offsets[k])
        return total

    data = np.empty((spec.timesteps, 3, h, w), dtype=np.float32)
    for t in range(spec.timesteps):
        eta = eta_stencil(t)
        data[t, 0] = -VELOCITY_SCALE * depth * (eta[1] - eta[2]) / (2.0 * hx)
        data[t, 1] = -VELOCITY_SCALE * depth * (eta[3] - eta[4]) / (2.0 * hy)
        data[t, 2] = eta[0]

    hr = TidalField(data=data, mask=hr_mask, extent=DEFAULT_EXTENT,
                    meters_per_cell=HR_METERS_PER_CELL)
    hr = infill_nearest(hr)

    s = spec.scale
    lh, lw = spec.lr_height, spec.lr_width
    blocks = hr.data.astype(np.float64).reshape(spec.timesteps, 3, lh, s, lw, s)
    lr_data = blocks.mean(axis=(3, 5)).astype(np.float32)
    sea_counts = hr_mask.reshape(lh, s, lw, s).sum(axis=(1, 3))
    lr_mask = 2 * sea_counts >= s * s

    lr = TidalField(data=lr_data, mask=lr_mask, extent=DEFAULT_EXTENT,
                    meters_per_cell=HR_METERS_PER_CELL * s)
    lr = infill_nearest(lr)
    return lr, hr


def split_dataset(lr: TidalField, hr: TidalField,
                  fractions: tuple[float, float, float]):
    """Contiguous temporal train/val/test split; leftover steps go to train."""
    if lr.timesteps != hr.timesteps:
        raise ValueError("lr/hr timestep counts differ")
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) <= 0:
        raise ValueError("fractions must be positive")
    if abs(f_train + f_val + f_test - 1.0) > 1e-6:
        raise ValueError("fractions must sum to 1")
    t = lr.timesteps
    n_val = int(t * f_val)
    n_test = int(t * f_test)
    n_train = t - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"too few timesteps ({t}) for split {fractions}")
    bounds = (0, n_train, n_train + n_val, t)
    return tuple(
        (lr.slice_time(bounds[i], bounds[i + 1]), hr.slice_time(bounds[i], bounds[i + 1]))
        for i in range(3)
    )
