"""Signed-distance scene representations.

Two field kinds share one evaluation interface: analytic primitive
compositions (exact distances, used as oracles and for dataset synthesis)
and a trainable multi-level dense voxel grid. Grid values are stored as one
flat float64 vector holding every level back to back, x-fastest within a
level (flat index ix + res*iy + res^2*iz), which is also the checkpoint
layout. The field value at a point is the sum of the trilinearly
interpolated active levels; queries outside the bounding cube clamp to the
cube surface and add the exterior Euclidean distance, keeping the field
positive and Lipschitz outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from .errors import (DatasetTruncatedError, DatasetValidationError,
                     DatasetVersionError, DomainError)

DEFAULT_RESOLUTIONS = (16, 24, 32, 48, 64, 96)
DIR_ENC_FREQS = 4          # sin/cos per axis, so 6 * DIR_ENC_FREQS dims
HEAD_HIDDEN = 16
FEAT_CHANNELS = 2
PHI_FLOOR = 1e-290         # keeps the density denominator away from 0
SHARPNESS_FLOOR = 1e-4

_CKPT_MAGIC = b"SDFG"
_HEAD_MAGIC = b"SDFH"
_CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# analytic primitives

@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: float = 1.0

    def sdf(self, pts):
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    albedo: float = 1.0

    def sdf(self, pts):
        q = np.abs(pts - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class Torus:
    """Ring in the x-y plane around the z axis through `center`."""

    center: np.ndarray
    major_radius: float
    minor_radius: float
    albedo: float = 1.0

    def sdf(self, pts):
        rel = pts - self.center
        rho = np.linalg.norm(rel[..., :2], axis=-1) - self.major_radius
        return np.hypot(rho, rel[..., 2]) - self.minor_radius


@dataclass
class AnalyticSdf:
    """Min-union of primitives with a fixed density sharpness."""

    primitives: list
    bounding_radius: float = 1.5
    s: float = 64.0

    @property
    def kind(self):
        return "analytic"


@dataclass
class HeadParams:
    """Weights of the 1-hidden-layer radiance decoder."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class GridSdf:
    resolutions: tuple
    values: np.ndarray        # all levels concatenated, flat, float64
    feat0: np.ndarray         # per-node feature channel 0, same layout
    feat1: np.ndarray
    offsets: tuple            # start of each level inside the flat vectors
    bounding_radius: float
    s: np.ndarray             # 0-d float64, learnable sharpness
    active_count: int
    head: HeadParams

    @property
    def kind(self):
        return "grid"

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolutions)
        if any(b <= a for a, b in zip(res, res[1:])):
            raise DomainError("grid resolutions must strictly increase")
        if not float(self.s) > 0.0:
            raise DomainError("sharpness s must stay positive")
        self.resolutions = res

    def level_view(self, l):
        res = self.resolutions[l]
        off = self.offsets[l]
        return self.values[off:off + res ** 3]


def head_input_dim(n_levels):
    return 3 + 6 * DIR_ENC_FREQS + FEAT_CHANNELS * n_levels


def init_head(n_levels, rng):
    d = head_input_dim(n_levels)
    w1 = rng.standard_normal((d, HEAD_HIDDEN)) / np.sqrt(d)
    b1 = np.zeros(HEAD_HIDDEN)
    w2 = rng.standard_normal((HEAD_HIDDEN, 1)) / np.sqrt(HEAD_HIDDEN)
    b2 = np.zeros(1)
    return HeadParams(w1, b1, w2, b2)


# ---------------------------------------------------------------------------
# evaluation

def _analytic_stack(fld, pts):
    if not fld.primitives:
        return None
    return np.stack([p.sdf(pts) for p in fld.primitives], axis=0)


def _analytic_sdf(fld, pts):
    stack = _analytic_stack(fld, pts)
    if stack is None:
        return np.full(pts.shape[:-1], 1e6)
    return stack.min(axis=0)


def analytic_albedo(fld, pts):
    """Albedo of the nearest primitive at each point (0 for empty scenes)."""
    stack = _analytic_stack(fld, pts)
    if stack is None:
        return np.zeros(pts.shape[:-1])
    albedos = np.array([p.albedo for p in fld.primitives])
    return albedos[stack.argmin(axis=0)]


def clamp_to_cube(pts, bounding_radius):
    """Clamp points into the bounding cube; also return the exterior distance."""
    pc = np.clip(pts, -bounding_radius, bounding_radius)
    d = pts - pc
    extra = np.sqrt(np.einsum("...i,...i->...", d, d))
    return pc, extra


def _axis_coeffs(col, res, bounding_radius):
    # truncation == floor: clamped coordinates give u >= 0
    u = (col + bounding_radius) * ((res - 1) / (2.0 * bounding_radius))
    i = u.astype(np.int64)
    np.clip(i, 0, res - 2, out=i)
    u -= i
    return i, u


def _fill_corners(out_idx, out_w, s, base_yz, ix, fx, gx, p00, p10, p01, p11,
                  res):
    # corner order: dz outer, dy middle, dx inner
    sy, sz = res, res * res
    base = base_yz + ix
    np.multiply(gx, p00, out=out_w[0, s]); out_idx[0, s] = base
    np.multiply(fx, p00, out=out_w[1, s]); np.add(base, 1, out=out_idx[1, s])
    np.multiply(gx, p10, out=out_w[2, s]); np.add(base, sy, out=out_idx[2, s])
    np.multiply(fx, p10, out=out_w[3, s]); np.add(base, 1 + sy, out=out_idx[3, s])
    np.multiply(gx, p01, out=out_w[4, s]); np.add(base, sz, out=out_idx[4, s])
    np.multiply(fx, p01, out=out_w[5, s]); np.add(base, 1 + sz, out=out_idx[5, s])
    np.multiply(gx, p11, out=out_w[6, s]); np.add(base, sy + sz, out=out_idx[6, s])
    np.multiply(fx, p11, out=out_w[7, s]); np.add(base, 1 + sy + sz, out=out_idx[7, s])


def interp_coeffs(res, bounding_radius, pts, out_idx=None, out_w=None):
    """Trilinear corner indices and weights for clamped points.

    Returns idx (8, N) flat lattice indices and w (8, N) weights summing to 1
    (written into out_idx/out_w when provided).
    """
    n = pts.shape[0]
    idx = np.empty((8, n), np.int64) if out_idx is None else out_idx
    w = np.empty((8, n)) if out_w is None else out_w
    ix, fx = _axis_coeffs(np.ascontiguousarray(pts[:, 0]), res, bounding_radius)
    iy, fy = _axis_coeffs(np.ascontiguousarray(pts[:, 1]), res, bounding_radius)
    iz, fz = _axis_coeffs(np.ascontiguousarray(pts[:, 2]), res, bounding_radius)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    byz = iz * res
    byz += iy
    byz *= res
    _fill_corners(idx, w, slice(None), byz, ix, fx, gx,
                  gy * gz, fy * gz, gy * fz, fy * fz, res)
    return idx, w


def stencil_coeffs(res, bounding_radius, pc7, n, out_idx, out_w):
    """Trilinear coefficients for a 7-point finite-difference stencil.

    pc7 holds clamped blocks [center | +x | +y | +z | -x | -y | -z] of n rows
    each; offset blocks share the center's untouched coordinates (clamping is
    per-coordinate), so only one axis is recomputed per block. Output matches
    interp_coeffs applied block by block.
    """
    ix, fx = _axis_coeffs(np.ascontiguousarray(pc7[:n, 0]), res, bounding_radius)
    iy, fy = _axis_coeffs(np.ascontiguousarray(pc7[:n, 1]), res, bounding_radius)
    iz, fz = _axis_coeffs(np.ascontiguousarray(pc7[:n, 2]), res, bounding_radius)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    wy0z0, wy1z0 = gy * gz, fy * gz
    wy0z1, wy1z1 = gy * fz, fy * fz
    byz = iz * res
    byz += iy
    byz *= res

    def blk(b):
        return slice(b * n, (b + 1) * n)

    _fill_corners(out_idx, out_w, blk(0), byz, ix, fx, gx,
                  wy0z0, wy1z0, wy0z1, wy1z1, res)
    for b in (1, 4):          # +x, -x: y/z parts shared
        ixb, fxb = _axis_coeffs(np.ascontiguousarray(pc7[blk(b), 0]),
                                res, bounding_radius)
        _fill_corners(out_idx, out_w, blk(b), byz, ixb, fxb, 1.0 - fxb,
                      wy0z0, wy1z0, wy0z1, wy1z1, res)
    for b in (2, 5):          # +y, -y
        iyb, fyb = _axis_coeffs(np.ascontiguousarray(pc7[blk(b), 1]),
                                res, bounding_radius)
        gyb = 1.0 - fyb
        byzb = iz * res
        byzb += iyb
        byzb *= res
        _fill_corners(out_idx, out_w, blk(b), byzb, ix, fx, gx,
                      gyb * gz, fyb * gz, gyb * fz, fyb * fz, res)
    for b in (3, 6):          # +z, -z
        izb, fzb = _axis_coeffs(np.ascontiguousarray(pc7[blk(b), 2]),
                                res, bounding_radius)
        gzb = 1.0 - fzb
        byzb = izb * res
        byzb += iy
        byzb *= res
        _fill_corners(out_idx, out_w, blk(b), byzb, ix, fx, gx,
                      gy * gzb, fy * gzb, gy * fzb, fy * fzb, res)


def _grid_sdf(fld, pts, active=None):
    active = fld.active_count if active is None else active
    pc, extra = clamp_to_cube(pts, fld.bounding_radius)
    out = extra.copy()
    for l in range(active):
        idx, w = interp_coeffs(fld.resolutions[l], fld.bounding_radius, pc)
        out += (fld.values[fld.offsets[l] + idx] * w).sum(axis=0)
    return out


def grid_latent_many(fld, pts):
    """Per-level interpolated features, (N, FEAT_CHANNELS * n_levels).

    Inactive levels contribute zeros so the radiance-head input width does
    not depend on the unlock schedule.
    """
    n = pts.shape[0]
    L = len(fld.resolutions)
    out = np.zeros((n, FEAT_CHANNELS * L))
    pc, _ = clamp_to_cube(pts, fld.bounding_radius)
    for l in range(fld.active_count):
        idx, w = interp_coeffs(fld.resolutions[l], fld.bounding_radius, pc)
        gidx = fld.offsets[l] + idx
        out[:, 2 * l] = (fld.feat0[gidx] * w).sum(axis=0)
        out[:, 2 * l + 1] = (fld.feat1[gidx] * w).sum(axis=0)
    return out


def sdf_eval_many(fld, pts):
    """Vectorized field evaluation, pts (..., 3) -> (...)."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    if fld.kind == "analytic":
        vals = _analytic_sdf(fld, flat)
    else:
        vals = _grid_sdf(fld, flat)
    return vals.reshape(pts.shape[:-1])


def sdf_eval(fld, point):
    return float(sdf_eval_many(fld, np.asarray(point, dtype=np.float64)[None, :])[0])


@dataclass
class FieldGradient:
    gradient: np.ndarray
    normal: np.ndarray
    degenerate: bool = False


def sdf_gradient(fld, point, eps):
    """Central finite differences per axis, normal as the normalized gradient."""
    if not eps > 0:
        raise DomainError("eps must be positive")
    point = np.asarray(point, dtype=np.float64)
    offs = np.concatenate([np.eye(3) * eps, -np.eye(3) * eps], axis=0)
    vals = sdf_eval_many(fld, point[None, :] + offs)
    grad = (vals[:3] - vals[3:]) / (2.0 * eps)
    norm = np.linalg.norm(grad)
    if norm < 1e-12:
        return FieldGradient(grad, np.zeros(3), degenerate=True)
    return FieldGradient(grad, grad / norm, degenerate=False)


def density_from_phi(phi, t):
    """Forward-difference density: sigma_i = max((phi_i - phi_{i+1}) / (dt_i phi_i), 0).

    The last sample copies its predecessor. phi and t share the last axis.
    """
    dt = np.diff(t, axis=-1)
    num = phi[..., :-1] - phi[..., 1:]
    sig = np.maximum(num / (dt * phi[..., :-1]), 0.0)
    return np.concatenate([sig, sig[..., -1:]], axis=-1)


def density_along_ray(fld, samples, ray):
    """Density at ordered distances `samples` along `ray` (spec conversion)."""
    t = np.asarray(samples, dtype=np.float64)
    if t.ndim != 1 or t.size < 2:
        raise DomainError("need at least 2 ordered samples")
    if not np.all(np.diff(t) > 0):
        raise DomainError("sample distances must strictly increase")
    pts = ray.origin + t[:, None] * ray.direction
    f = sdf_eval_many(fld, pts)
    phi = np.maximum(expit(float(fld.s) * f), PHI_FLOOR)
    return density_from_phi(phi, t)


# ---------------------------------------------------------------------------
# construction

def lattice_points(res, bounding_radius):
    c = np.linspace(-bounding_radius, bounding_radius, res)
    Z, Y, X = np.meshgrid(c, c, c, indexing="ij")
    # C-order ravel of [iz, iy, ix] puts x fastest
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


def _alloc(resolutions):
    sizes = [r ** 3 for r in resolutions]
    offsets = tuple(int(o) for o in np.cumsum([0] + sizes[:-1]))
    return offsets, int(np.sum(sizes))


def init_sphere_grid(resolutions=None, radius=0.5, bounding_radius=1.5,
                     initial_active=None, rng=None):
    """Grid field whose level-0 lattice holds the analytic sphere SDF.

    Higher levels start at zero and are unmasked by the coarse-to-fine
    schedule; features start at zero and the radiance head at a small seeded
    init.
    """
    resolutions = tuple(resolutions) if resolutions else DEFAULT_RESOLUTIONS
    if not radius < bounding_radius:
        raise DomainError("init radius must be smaller than the bounding radius")
    rng = np.random.default_rng(0) if rng is None else rng
    offsets, total = _alloc(resolutions)
    values = np.zeros(total)
    pts0 = lattice_points(resolutions[0], bounding_radius)
    values[:resolutions[0] ** 3] = np.linalg.norm(pts0, axis=-1) - radius
    active = min(4, len(resolutions)) if initial_active is None else initial_active
    return GridSdf(resolutions, values, np.zeros(total), np.zeros(total),
                   offsets, bounding_radius, np.array(10.0), active,
                   init_head(len(resolutions), rng))


def grid_from_function(resolutions, bounding_radius, fn):
    """Single-purpose helper: level 0 sampled from fn, everything active."""
    resolutions = tuple(resolutions)
    offsets, total = _alloc(resolutions)
    values = np.zeros(total)
    values[:resolutions[0] ** 3] = fn(lattice_points(resolutions[0], bounding_radius))
    return GridSdf(resolutions, values, np.zeros(total), np.zeros(total),
                   offsets, bounding_radius, np.array(10.0), len(resolutions),
                   init_head(len(resolutions), np.random.default_rng(0)))


# ---------------------------------------------------------------------------
# schedules

@dataclass
class CoarseToFineSchedule:
    initial_levels: int = 4
    levels_per_unlock: int = 2
    unlock_interval: int = 5000
    total_levels: int = 6


def active_levels(step, schedule):
    """How many grid levels are unmasked at a training step."""
    if step < 0:
        raise DomainError("step must be >= 0")
    n = schedule.initial_levels + schedule.levels_per_unlock * (step // schedule.unlock_interval)
    return min(schedule.total_levels, n)


def voxel_size(res, bounding_radius):
    return 2.0 * bounding_radius / (res - 1)


def fd_eps_at(step, total_steps, h_coarse, h_fine):
    """Finite-difference step: coarsest voxel size decayed exponentially,
    reaching the finest voxel size at the last executed step."""
    if total_steps <= 1:
        return h_coarse if step <= 0 else h_fine
    frac = min(1.0, step / (total_steps - 1))
    return h_coarse * (h_fine / h_coarse) ** frac


def fd_eps_bounds(fld):
    return (voxel_size(fld.resolutions[0], fld.bounding_radius),
            voxel_size(fld.resolutions[-1], fld.bounding_radius))


# ---------------------------------------------------------------------------
# sphere tracing (oracle depths for analytic scenes)

def sphere_trace_batch(fld, origins, dirs, near, far, tol=1e-8, max_steps=512,
                       step_scale=1.0):
    """March each ray to its first zero crossing; returns (t, hit)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    t = np.full(n, float(near))
    hit = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        idx = alive.nonzero()[0]
        pts = origins[idx] + t[idx, None] * dirs[idx]
        f = sdf_eval_many(fld, pts)
        landed = f < tol
        hit[idx[landed]] = True
        alive[idx[landed]] = False
        adv = idx[~landed]
        t[adv] += step_scale * f[~landed]
        overshot = t[adv] > far
        alive[adv[overshot]] = False
    return t, hit


# ---------------------------------------------------------------------------
# checkpoints

def save_field(fld, path, step=0):
    """Write the grid checkpoint plus its sidecar (features, head, counters).

    The main file is self-contained for geometry: header, per-level
    resolutions, float32 lattices x-fastest, then the sharpness scalar.
    """
    if fld.kind != "grid":
        raise DomainError("only grid fields can be checkpointed")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(np.array([_CKPT_VERSION, len(fld.resolutions)], "<u4").tobytes())
        fh.write(b"\x00" * 20)
        fh.write(np.array(fld.resolutions, "<u4").tobytes())
        for l in range(len(fld.resolutions)):
            fh.write(fld.level_view(l).astype("<f4").tobytes())
        fh.write(np.array([float(fld.s)], "<f4").tobytes())
    with open(str(path) + ".head", "wb") as fh:
        fh.write(_HEAD_MAGIC)
        meta = [_CKPT_VERSION, len(fld.resolutions), step, fld.active_count,
                HEAD_HIDDEN, fld.head.w1.shape[0], FEAT_CHANNELS]
        fh.write(np.array(meta, "<u4").tobytes())
        fh.write(fld.feat0.astype("<f8").tobytes())
        fh.write(fld.feat1.astype("<f8").tobytes())
        for arr in (fld.head.w1, fld.head.b1, fld.head.w2, fld.head.b2):
            fh.write(arr.astype("<f8").tobytes())
        fh.write(np.array([float(fld.s), fld.bounding_radius], "<f8").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetTruncatedError(f"checkpoint truncated while reading {what}")
    return buf


def load_field(path):
    """Read a checkpoint; returns (field, step).

    A missing sidecar yields zero features, a default-seeded head, and all
    levels active, so bare geometry files stay loadable.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _CKPT_MAGIC:
            raise DatasetValidationError(f"{path}: not a field checkpoint")
        version, count = np.frombuffer(_read_exact(fh, 8, "header"), "<u4")
        if version != _CKPT_VERSION:
            raise DatasetVersionError(f"{path}: unsupported version {version}")
        _read_exact(fh, 20, "reserved header bytes")
        res = tuple(int(r) for r in
                    np.frombuffer(_read_exact(fh, 4 * count, "resolutions"), "<u4"))
        if any(b <= a for a, b in zip(res, res[1:])) or any(r < 2 for r in res):
            raise DatasetValidationError(f"{path}: bad resolution list {res}")
        offsets, total = _alloc(res)
        values = np.empty(total)
        for l, r in enumerate(res):
            raw = _read_exact(fh, 4 * r ** 3, f"level {l}")
            values[offsets[l]:offsets[l] + r ** 3] = np.frombuffer(raw, "<f4")
        s = float(np.frombuffer(_read_exact(fh, 4, "sharpness"), "<f4")[0])
    feat0 = np.zeros(total)
    feat1 = np.zeros(total)
    head = init_head(len(res), np.random.default_rng(0))
    active, step = len(res), 0
    bounding_radius = 1.5
    head_path = str(path) + ".head"
    try:
        fh = open(head_path, "rb")
    except FileNotFoundError:
        fh = None
    if fh is not None:
        with fh:
            if _read_exact(fh, 4, "sidecar magic") != _HEAD_MAGIC:
                raise DatasetValidationError(f"{head_path}: bad magic")
            meta = np.frombuffer(_read_exact(fh, 28, "sidecar header"), "<u4")
            if meta[0] != _CKPT_VERSION:
                raise DatasetVersionError(f"{head_path}: unsupported version {meta[0]}")
            if meta[1] != count or meta[4] != HEAD_HIDDEN or meta[6] != FEAT_CHANNELS:
                raise DatasetValidationError(f"{head_path}: inconsistent sidecar shape")
            step, active, d_in = int(meta[2]), int(meta[3]), int(meta[5])
            feat0 = np.frombuffer(_read_exact(fh, 8 * total, "feat0"), "<f8").copy()
            feat1 = np.frombuffer(_read_exact(fh, 8 * total, "feat1"), "<f8").copy()
            w1 = np.frombuffer(_read_exact(fh, 8 * d_in * HEAD_HIDDEN, "w1"),
                               "<f8").reshape(d_in, HEAD_HIDDEN).copy()
            b1 = np.frombuffer(_read_exact(fh, 8 * HEAD_HIDDEN, "b1"), "<f8").copy()
            w2 = np.frombuffer(_read_exact(fh, 8 * HEAD_HIDDEN, "w2"),
                               "<f8").reshape(HEAD_HIDDEN, 1).copy()
            b2 = np.frombuffer(_read_exact(fh, 8, "b2"), "<f8").copy()
            tail = np.frombuffer(_read_exact(fh, 16, "sidecar tail"), "<f8")
            s, bounding_radius = float(tail[0]), float(tail[1])
            head = HeadParams(w1, b1, w2, b2)
    if not s > 0.0:
        raise DatasetValidationError(f"{path}: non-positive sharpness {s}")
    if not bounding_radius > 0.0:
        raise DatasetValidationError(f"{path}: non-positive bounding radius")
    try:
        fld = GridSdf(res, values, feat0, feat1, offsets, bounding_radius,
                      np.array(s), active, head)
    except DomainError as e:
        raise DatasetValidationError(str(e)) from e
    return fld, step
