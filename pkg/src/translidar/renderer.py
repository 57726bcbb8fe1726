"""Time-resolved volume rendering.

A ray is marched with uniform-in-depth jittered samples; densities come from
the field's sigmoid conversion; compositing uses the two-way weights
T(t)^2 * alpha for rendered flux and the one-way weights sigma * T for depth
and regularizers. Each sample deposits weight * radiance * t^-2 into the bin
holding its round-trip distance 2t, then the histogram is convolved with the
instrument pulse.

Two march implementations exist on purpose: a plain-numpy one used for
dataset synthesis and evaluation renders, and a taped one (march_nodes /
transient_nodes) used by training. They share the sampling and the exact
arithmetic sequence so their forward values agree to float64 roundoff; a
test guards that equivalence.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import DomainError
from .field import (PHI_FLOOR, clamp_to_cube, density_from_phi,
                    analytic_albedo, grid_latent_many, interp_coeffs,
                    sdf_eval_many, stencil_coeffs, voxel_size)
from .geometry import _strata, pixel_directions

diagnostics = {"dropped_samples": 0}

DIR_FREQS = (1.0, 2.0, 4.0, 8.0)
NORM_EPS = 1e-20


# ---------------------------------------------------------------------------
# domain types

@dataclass
class PulseKernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size == 0:
            raise DomainError("pulse kernel must be a non-empty 1-D array")
        if not np.all(np.isfinite(taps)) or np.any(taps < 0):
            raise DomainError("pulse taps must be finite and non-negative")
        if abs(taps.sum() - 1.0) > 1e-9:
            raise DomainError("pulse taps must sum to 1 within 1e-9")
        self.taps = taps

    @property
    def center(self):
        return self.taps.size // 2

    @property
    def peak(self):
        return int(np.argmax(self.taps))


def gaussian_pulse(n_taps=7, sigma_bins=1.2):
    x = np.arange(n_taps) - n_taps // 2
    taps = np.exp(-0.5 * (x / sigma_bins) ** 2)
    return PulseKernel(taps / taps.sum())


@dataclass
class TransientImage:
    data: np.ndarray          # (H, W, T)
    bin_width: float          # round-trip distance per bin
    t0_offset: float          # round-trip distance of bin 0's left edge
    view: object = None
    exposure_scale: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DomainError("transient data must be H x W x T")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise DomainError("transient entries must be finite and >= 0")
        if not self.bin_width > 0:
            raise DomainError("bin_width must be positive")
        self.data = data

    @property
    def n_bins(self):
        return self.data.shape[2]


@dataclass
class RaySamples:
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    radiance: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    weight_render: np.ndarray
    weight_reg: np.ndarray
    near: float
    far: float


class DepthEstimate(NamedTuple):
    distance: float
    no_surface: bool


@dataclass
class RenderConfig:
    n_samples: int
    n_bins: int
    bin_width: float
    t0_offset: float
    near: float
    far: float
    n_sub: int = 1
    fd_eps: Optional[float] = None
    pulse: Optional[PulseKernel] = None
    exposure_scale: float = 1.0


@dataclass
class RenderResult:
    transient: TransientImage
    intensity: np.ndarray
    depth: np.ndarray
    no_surface: np.ndarray


# ---------------------------------------------------------------------------
# shared pieces of both march paths

def _sample_ts(n_rays, n_samples, near, far, rng, u=None):
    if not (0 < near < far):
        raise DomainError("need 0 < near < far")
    if n_samples < 2:
        raise DomainError("need n_samples >= 2")
    step = (far - near) / n_samples
    if u is None:
        if rng is None:
            u = np.full((n_rays, n_samples), 0.5)
        else:
            u = rng.random((n_rays, n_samples))
    t = near + (np.arange(n_samples) + u) * step
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=-1)
    delta[:, -1] = far - t[:, -1]
    return t, delta


def transmittance_weights(sigma, delta):
    """alpha, one-way T, two-way render weights, one-way reg weights."""
    a = sigma * delta
    cs = np.cumsum(a, axis=-1)
    excl = np.empty_like(cs)
    excl[..., 0] = 0.0
    excl[..., 1:] = cs[..., :-1]
    trans = np.exp(-excl)
    alpha = 1.0 - np.exp(-a)
    return alpha, trans, trans * trans * alpha, sigma * trans


def direction_encoding(dirs):
    """Sin/cos features of the ray direction at frequencies 1, 2, 4, 8."""
    parts = []
    for f in DIR_FREQS:
        parts.append(np.sin(f * dirs))
        parts.append(np.cos(f * dirs))
    return np.concatenate(parts, axis=-1)


def _sharpness(fld):
    return float(fld.s)


def _grid_radiance(fld, pts, dirs, fd_eps):
    """Numpy forward of the radiance decoder for grid fields."""
    eye = np.eye(3)
    offs = np.concatenate([fd_eps * eye, -fd_eps * eye], axis=0)
    vals = sdf_eval_many(fld, pts[None, :, :] + offs[:, None, :])
    g = (vals[:3] - vals[3:]) / (2.0 * fd_eps)
    norm = np.sqrt((g * g).sum(axis=0) + NORM_EPS)
    normal = (g / norm).T
    x = np.concatenate([normal, direction_encoding(dirs),
                        grid_latent_many(fld, pts)], axis=1)
    h = np.maximum(x @ fld.head.w1 + fld.head.b1, 0.0)
    return expit(h @ fld.head.w2 + fld.head.b2)[:, 0]


def _march_arrays(fld, origins, dirs, near, far, n_samples, rng=None,
                  fd_eps=None, radiance=True, radiance_head=None):
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t, delta = _sample_ts(origins.shape[0], n_samples, near, far, rng)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    f = sdf_eval_many(fld, flat).reshape(t.shape)
    phi = np.maximum(expit(_sharpness(fld) * f), PHI_FLOOR)
    sigma = density_from_phi(phi, t)
    alpha, trans, w_render, w_reg = transmittance_weights(sigma, delta)
    if not radiance:
        rad = np.zeros_like(t)
    elif radiance_head is not None:
        dflat = np.repeat(dirs, n_samples, axis=0)
        rad = np.asarray(radiance_head(flat, dflat)).reshape(t.shape)
    elif fld.kind == "analytic":
        rad = analytic_albedo(fld, flat).reshape(t.shape)
    else:
        if fd_eps is None:
            fd_eps = voxel_size(fld.resolutions[-1], fld.bounding_radius)
        dflat = np.repeat(dirs, n_samples, axis=0)
        rad = _grid_radiance(fld, flat, dflat, fd_eps).reshape(t.shape)
    return t, delta, sigma, rad, alpha, trans, w_render, w_reg


def march_ray(fld, ray, near, far, n_samples, radiance_head=None, rng=None,
              fd_eps=None, radiance=True):
    """March one ray; returns per-sample quantities as a RaySamples record."""
    out = _march_arrays(fld, ray.origin[None, :], ray.direction[None, :],
                        near, far, n_samples, rng=rng, fd_eps=fd_eps,
                        radiance=radiance, radiance_head=radiance_head)
    t, delta, sigma, rad, alpha, trans, w_render, w_reg = (a[0] for a in out)
    return RaySamples(t, delta, sigma, rad, alpha, trans, w_render, w_reg,
                      float(near), float(far))


# ---------------------------------------------------------------------------
# per-ray operations

def round_trip_bins(t, bin_width, t0_offset):
    return np.floor((2.0 * np.asarray(t) - t0_offset) / bin_width).astype(np.int64)


def bin_transient(samples, bin_width, n_bins, t0_offset):
    """Histogram one ray's deposited flux over round-trip distance bins."""
    if not bin_width > 0:
        raise DomainError("bin_width must be positive")
    if n_bins < 1:
        raise DomainError("need n_bins >= 1")
    contrib = samples.weight_render * samples.radiance / samples.t ** 2
    bins = round_trip_bins(samples.t, bin_width, t0_offset)
    valid = (bins >= 0) & (bins < n_bins)
    diagnostics["dropped_samples"] += int(np.count_nonzero(~valid))
    return np.bincount(bins[valid], weights=contrib[valid], minlength=n_bins)


def _bin_batch(t, contrib, bin_width, n_bins, t0_offset):
    """Vectorized binning for a (R, S) batch; returns (R, n_bins)."""
    n_rays = t.shape[0]
    bins = round_trip_bins(t, bin_width, t0_offset)
    valid = (bins >= 0) & (bins < n_bins)
    diagnostics["dropped_samples"] += int(np.count_nonzero(~valid))
    ray_idx = np.repeat(np.arange(n_rays), t.shape[1]).reshape(t.shape)
    flat_idx = (ray_idx * n_bins + bins)[valid]
    hist = np.bincount(flat_idx, weights=contrib[valid],
                       minlength=n_rays * n_bins)
    return hist.reshape(n_rays, n_bins)


def convolve_pulse(transient, kernel):
    """Same-length linear convolution along the last axis; delta kernel is
    the identity."""
    if not isinstance(kernel, PulseKernel):
        kernel = PulseKernel(kernel)
    return ad.conv_shift(np.asarray(transient, dtype=np.float64),
                         kernel.taps, kernel.center)


def integrate_intensity(transient):
    data = transient.data if isinstance(transient, TransientImage) else transient
    return np.asarray(data, dtype=np.float64).sum(axis=-1)


def argmax_depth(samples):
    """Distance of the strongest one-way weight; ties go to the nearer sample."""
    w = samples.weight_reg
    if w.size < 1:
        raise DomainError("need at least one sample")
    if not np.any(w > 0):
        return DepthEstimate(float(samples.far), True)
    return DepthEstimate(float(samples.t[np.argmax(w)]), False)


def expected_depth(samples):
    """Weight-averaged interval midpoints, with t_{-1} taken as the near bound."""
    w = samples.weight_reg
    if w.size < 2:
        raise DomainError("need at least two samples")
    total = w.sum()
    if not total > 0:
        return DepthEstimate(float(samples.far), True)
    prev = np.concatenate([[samples.near], samples.t[:-1]])
    mids = 0.5 * (samples.t + prev)
    return DepthEstimate(float((w * mids).sum() / total), False)


# ---------------------------------------------------------------------------
# full-view rendering

def _thread_count():
    try:
        return max(1, int(os.environ.get("TRANSLIDAR_THREADS", "1")))
    except ValueError:
        return 1


def render_view(fld, camera, config, rng=None, radiance_head=None):
    """Render the per-pixel transient cube, intensity map, and depth map.

    Sub-ray transients are averaged before pulse convolution; depth comes
    from the first sub-ray's strongest one-way weight. Work is split over
    fixed row blocks (child generators spawned per block), so results do not
    depend on the worker-thread count.
    """
    if config.n_sub < 1:
        raise DomainError("need n_sub >= 1")
    H, W = camera.height, camera.width
    a, b = _strata(config.n_sub)
    flux = np.zeros((H, W, config.n_bins))
    depth = np.full((H, W), float(config.far))
    no_surface = np.ones((H, W), dtype=bool)

    rows_per_block = max(1, 2048 // max(1, W * config.n_sub))
    starts = list(range(0, H, rows_per_block))
    rngs = rng.spawn(len(starts)) if rng is not None else [None] * len(starts)

    def run_block(r0, block_rng):
        r1 = min(H, r0 + rows_per_block)
        jj, ii = np.meshgrid(np.arange(r0, r1), np.arange(W), indexing="ij")
        n_rays = ii.size
        acc = np.zeros((n_rays, config.n_bins))
        for s in range(config.n_sub):
            p, q = s % a, s // a
            if block_rng is None:
                du = np.full(ii.shape, 0.5)
                dv = np.full(ii.shape, 0.5)
            else:
                du = block_rng.random(ii.shape)
                dv = block_rng.random(ii.shape)
            u = (p + du) / a
            v = (q + dv) / b
            dirs = pixel_directions(camera, ii.ravel(), jj.ravel(),
                                    u.ravel(), v.ravel())
            origins = np.broadcast_to(camera.origin, dirs.shape)
            t, delta, sigma, rad, alpha, trans, w_render, w_reg = _march_arrays(
                fld, origins, dirs, config.near, config.far, config.n_samples,
                rng=block_rng, fd_eps=config.fd_eps, radiance_head=radiance_head)
            acc += _bin_batch(t, w_render * rad / t ** 2, config.bin_width,
                              config.n_bins, config.t0_offset)
            if s == 0:
                hit = (w_reg > 0).any(axis=1)
                best = t[np.arange(n_rays), np.argmax(w_reg, axis=1)]
                d = np.where(hit, best, config.far).reshape(r1 - r0, W)
                depth[r0:r1] = d
                no_surface[r0:r1] = ~hit.reshape(r1 - r0, W)
        flux[r0:r1] = (acc / config.n_sub).reshape(r1 - r0, W, config.n_bins)

    workers = _thread_count()
    if workers == 1 or len(starts) == 1:
        for r0, block_rng in zip(starts, rngs):
            run_block(r0, block_rng)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_block, starts, rngs))

    if config.pulse is not None:
        flux = convolve_pulse(flux, config.pulse)
    flux = flux * config.exposure_scale
    transient = TransientImage(flux, config.bin_width, config.t0_offset,
                               view=camera, exposure_scale=config.exposure_scale)
    return RenderResult(transient, integrate_intensity(flux), depth, no_surface)


# ---------------------------------------------------------------------------
# taped march for the training loop

@dataclass
class GridLeaves:
    grid: tuple                 # per-level Nodes over level-local indices
    feat0: tuple                # same layout, active levels only
    feat1: tuple
    s: ad.Node
    w1: ad.Node
    b1: ad.Node
    w2: ad.Node
    b2: ad.Node


def make_leaves(tape, fld, feats=True):
    """Register the field's trainable arrays on `tape`.

    Grid and feature leaves are per active level over level-local indices,
    so each backward bincount stays at that level's size. `feats=False`
    skips the feature leaves for passes that never shade (their gradients
    would be dense zeros).
    """
    gv, f0, f1 = [], [], []
    for l in range(fld.active_count):
        o, r3 = fld.offsets[l], fld.resolutions[l] ** 3
        gv.append(tape.leaf(fld.values[o:o + r3], f"grid_{l}"))
        if feats:
            f0.append(tape.leaf(fld.feat0[o:o + r3], f"feat0_{l}"))
            f1.append(tape.leaf(fld.feat1[o:o + r3], f"feat1_{l}"))
    return GridLeaves(
        grid=tuple(gv),
        feat0=tuple(f0),
        feat1=tuple(f1),
        s=tape.leaf(np.asarray(fld.s, dtype=np.float64), "s"),
        w1=tape.leaf(fld.head.w1, "w1"),
        b1=tape.leaf(fld.head.b1, "b1"),
        w2=tape.leaf(fld.head.w2, "w2"),
        b2=tape.leaf(fld.head.b2, "b2"),
    )


@dataclass
class MarchNodes:
    t: np.ndarray
    delta: np.ndarray
    sigma: ad.Node
    alpha: ad.Node
    trans: ad.Node
    weight_render: ad.Node
    weight_reg: ad.Node
    radiance: Optional[ad.Node]
    f_center: ad.Node         # raw field values at samples, (R*S,)
    grad_norm: ad.Node        # finite-difference gradient norms, (R*S,)
    near: float
    far: float
    dirs: np.ndarray


def march_nodes(tape, leaves, fld, origins, dirs, near, far, n_samples, rng,
                fd_eps, radiance=True, jitter=None, need_gradient=True):
    """Taped twin of the numpy march.

    One fused gather covers every active level at all 7 finite-difference
    points, so the backward pass over the grid is a single bincount. `jitter`
    optionally supplies the (R, n_samples) stratified offsets directly so a
    batch can be split into blocks without changing the random stream.
    `need_gradient=False` skips the finite-difference stencil entirely
    (weights only — no normals, no Eikonal residual); it requires
    radiance=False.
    """
    if not need_gradient and radiance:
        raise DomainError("radiance shading needs the gradient stencil")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    R = origins.shape[0]
    t, delta = _sample_ts(R, n_samples, near, far, rng, u=jitter)
    S = n_samples
    pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    n = pts.shape[0]

    if need_gradient:
        eye = np.eye(3)
        offs = np.concatenate([np.zeros((1, 3)), fd_eps * eye, -fd_eps * eye])
        pts7 = (pts[None, :, :] + offs[:, None, :]).reshape(-1, 3)
    else:
        pts7 = pts
    pc7, extra7 = clamp_to_cube(pts7, fld.bounding_radius)
    n7 = pc7.shape[0]

    active = fld.active_count
    idx_parts, w_parts = [], []
    acc = None
    for l in range(active):
        idx = np.empty((8, n7), np.int64)
        w = np.empty((8, n7))
        if need_gradient:
            stencil_coeffs(fld.resolutions[l], fld.bounding_radius,
                           pc7, n, idx, w)
        else:
            interp_coeffs(fld.resolutions[l], fld.bounding_radius,
                          pc7, out_idx=idx, out_w=w)
        idx_parts.append(idx)
        w_parts.append(w)
        lev = ad.gather_weighted(leaves.grid[l], idx, w)
        acc = lev if acc is None else acc + lev
    f7 = acc + extra7 if acc is not None else tape.constant(extra7)

    f_center = f7[0:n] if need_gradient else f7
    if need_gradient:
        inv = 1.0 / (2.0 * fd_eps)
        gx = (f7[n:2 * n] - f7[4 * n:5 * n]) * inv
        gy = (f7[2 * n:3 * n] - f7[5 * n:6 * n]) * inv
        gz = (f7[3 * n:4 * n] - f7[6 * n:7 * n]) * inv
        grad_norm = ad.sqrt(gx * gx + gy * gy + gz * gz + NORM_EPS)
    else:
        grad_norm = None

    fr = ad.reshape(f_center, (R, S))
    phi = ad.clamp_min(ad.sigmoid(leaves.s * fr), PHI_FLOOR)
    phi_left = phi[:, :S - 1]
    num = phi_left - phi[:, 1:]
    dt = np.diff(t, axis=-1)
    sig_head = ad.clamp_min(num / (phi_left * dt), 0.0)
    sigma = ad.concat([sig_head, sig_head[:, S - 2:S - 1]], axis=1)

    a = sigma * delta
    trans = ad.exp(-ad.cumsum_exclusive(a))
    alpha = 1.0 - ad.exp(-a)
    w_render = trans * trans * alpha
    w_reg = sigma * trans

    rad = None
    if radiance:
        norm_col = grad_norm
        nx, ny, nz = gx / norm_col, gy / norm_col, gz / norm_col
        normal = ad.concat([ad.reshape(nx, (n, 1)), ad.reshape(ny, (n, 1)),
                            ad.reshape(nz, (n, 1))], axis=1)
        enc = tape.constant(np.repeat(direction_encoding(dirs), S, axis=0))
        cols = []
        for l in range(len(fld.resolutions)):
            if l < active:
                # center points are rows [0, n) of the 7-point stencil
                gidx = idx_parts[l][:, :n]
                w = w_parts[l][:, :n]
                c0 = ad.gather_weighted(leaves.feat0[l], gidx, w)
                c1 = ad.gather_weighted(leaves.feat1[l], gidx, w)
            else:
                c0 = tape.constant(np.zeros(n))
                c1 = tape.constant(np.zeros(n))
            cols.append(ad.reshape(c0, (n, 1)))
            cols.append(ad.reshape(c1, (n, 1)))
        x = ad.concat([normal, enc] + cols, axis=1)
        h = ad.clamp_min(ad.matmul(x, leaves.w1) + leaves.b1, 0.0)
        rad = ad.reshape(ad.sigmoid(ad.matmul(h, leaves.w2) + leaves.b2), (R, S))

    return MarchNodes(t, delta, sigma, alpha, trans, w_render, w_reg, rad,
                      f_center, grad_norm, float(near), float(far), dirs)


@dataclass
class TransientNodes:
    flux: ad.Node             # (R, n_bins), pulse-convolved, exposure-scaled
    mass_oneway: ad.Node      # (R, n_bins), unconvolved T*alpha per bin
    dropped: int


def transient_nodes(m, bin_width, n_bins, t0_offset, pulse, exposure_scale=1.0):
    """Bin a taped march into per-ray transients (and one-way bin mass)."""
    if m.radiance is None:
        raise DomainError("march must carry radiance to form a transient")
    R, S = m.t.shape
    t_flat = m.t.ravel()
    bins = round_trip_bins(t_flat, bin_width, t0_offset)
    valid = (bins >= 0) & (bins < n_bins)
    ray_idx = np.repeat(np.arange(R), S)
    flat_idx = np.where(valid, ray_idx * n_bins + bins, 0)

    falloff = 1.0 / t_flat ** 2
    contrib = ad.reshape(m.weight_render * m.radiance, (R * S,)) * falloff
    flux = ad.reshape(ad.scatter_add(contrib, flat_idx, R * n_bins, valid),
                      (R, n_bins))
    flux = ad.conv_same(flux, pulse.taps, pulse.center) * exposure_scale

    oneway = ad.reshape(m.trans * m.alpha, (R * S,))
    mass = ad.reshape(ad.scatter_add(oneway, flat_idx, R * n_bins, valid),
                      (R, n_bins))
    return TransientNodes(flux, mass, int(np.count_nonzero(~valid)))
