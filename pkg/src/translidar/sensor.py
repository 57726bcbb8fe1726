"""Single-photon measurement model.

Expected counts are N * eta * flux + B with B = N * (eta * A + D); detections
are Poisson draws of that rate. Photon levels are set by one global scale
factor over all views (average photons per occupied pixel), low-flux variants
by binomial thinning of binned counts, which matches per-photon thinning in
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainError
from .renderer import TransientImage

BACKGROUND_PHOTONS = 0.001     # per this many captured scene photons:
SCENE_PHOTON_REFERENCE = 2850.0


@dataclass
class SensorModel:
    n_pulses: int
    efficiency: float
    ambient_rate: Union[float, np.ndarray] = 0.0
    dark_count: float = 0.0

    def __post_init__(self):
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise DomainError("n_pulses must be a positive integer")
        if not (0.0 < self.efficiency <= 1.0):
            raise DomainError("efficiency must lie in (0, 1]")
        self.n_pulses = int(self.n_pulses)
        self.ambient_rate = np.asarray(self.ambient_rate, dtype=np.float64)
        if np.any(self.background < 0):
            raise DomainError("background rate must be non-negative")

    @property
    def background(self):
        return self.n_pulses * (self.efficiency * self.ambient_rate
                                + self.dark_count)


def expected_counts(flux, model):
    """Per-bin Poisson rate N*eta*flux + B (B broadcast over bins)."""
    data = flux.data if isinstance(flux, TransientImage) else np.asarray(flux)
    if np.any(data < 0):
        raise DomainError("flux must be non-negative")
    bg = model.background
    if bg.ndim == 2:
        if bg.shape != data.shape[:2]:
            raise DomainError("ambient map shape does not match the flux cube")
        bg = bg[:, :, None]
    elif bg.ndim != 0:
        raise DomainError("ambient_rate must be a scalar or a per-pixel map")
    return model.n_pulses * model.efficiency * data + bg


def snr(rate):
    """Poisson mean-to-deviation ratio, sqrt(rate)."""
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate < 0):
        raise DomainError("rate must be non-negative")
    return np.sqrt(rate)


def sample_poisson(rates, rng):
    rates = np.asarray(rates, dtype=np.float64)
    if not np.all(np.isfinite(rates)) or np.any(rates < 0):
        raise DomainError("rates must be finite and non-negative")
    return rng.poisson(rates)


def scale_to_photon_level(cubes, masks, target_ppp):
    """One global factor bringing the occupied-pixel average to target_ppp.

    Returns (k, scaled cubes); each scaled cube also carries its
    exposure_scale multiplied by k so flux and counts stay commensurable.
    """
    if not target_ppp > 0:
        raise DomainError("target photon level must be positive")
    if len(cubes) != len(masks) or not cubes:
        raise DomainError("need one mask per flux cube")
    pixels = 0
    total = 0.0
    for cube, mask in zip(cubes, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != cube.data.shape[:2]:
            raise DomainError("mask shape does not match its cube")
        pixels += int(mask.sum())
        total += float(cube.data[mask].sum())
    if pixels == 0 or total <= 0.0:
        raise DomainError("masked flux is zero; cannot set a photon level")
    k = target_ppp * pixels / total
    scaled = [TransientImage(c.data * k, c.bin_width, c.t0_offset, view=c.view,
                             exposure_scale=c.exposure_scale * k)
              for c in cubes]
    return k, scaled


def background_per_bin(scene_photons, n_bins):
    """Uniform per-bin rate: 0.001 photons per 2850 scene photons, spread
    evenly over the bins."""
    if scene_photons < 0:
        raise DomainError("scene photon reference must be non-negative")
    if n_bins < 1:
        raise DomainError("need n_bins >= 1")
    return BACKGROUND_PHOTONS * scene_photons / SCENE_PHOTON_REFERENCE / n_bins


def add_background(cube, scene_photons):
    b = background_per_bin(scene_photons, cube.data.shape[2])
    return TransientImage(cube.data + b, cube.bin_width, cube.t0_offset,
                          view=cube.view, exposure_scale=cube.exposure_scale)


def occupied_mean(counts, mask):
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DomainError("mask selects no pixels")
    return float(np.asarray(counts)[mask].sum()) / n


def thin_histogram(counts, target_ppp, mask, rng):
    """Binomial thinning of binned counts down to a lower photon level.

    Keep probability p = target / current occupied-pixel mean; p = 1 returns
    an exact copy.
    """
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise DomainError("counts must be non-negative")
    current = occupied_mean(counts, mask)
    if current <= 0:
        raise DomainError("cannot thin a zero histogram")
    if target_ppp > current * (1 + 1e-12):
        raise DomainError("target photon level exceeds the current level")
    p = min(1.0, target_ppp / current)
    if p == 1.0:
        return counts.copy()
    return rng.binomial(counts.astype(np.int64), p)
