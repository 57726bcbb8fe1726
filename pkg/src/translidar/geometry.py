"""Cameras, pixel-footprint ray bundles, and unseen-viewpoint sampling.

Conventions: camera x is right, y is down, z is forward (the third rotation
column is the viewing axis). Pixel (i, j) means column i, row j, and covers
the unit square [i, i+1) x [j, j+1); sub-pixel jitter (u, v) in [0, 1)^2
selects a point inside it. Rays are parameterized by distance, so the
round-trip time of a sample at distance t spans the distance 2t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfigError, DomainError


@dataclass
class CameraPose:
    """Pinhole camera: world-from-camera rotation, origin, intrinsics."""

    rotation: np.ndarray  # (3, 3), world-from-camera, det +1
    origin: np.ndarray    # (3,), scene units
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.origin.shape != (3,):
            raise DomainError("camera pose needs a 3x3 rotation and 3-vector origin")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= 1e-9:
            raise DomainError(f"rotation is not orthonormal (|R^T R - I| = {err:g})")
        if np.linalg.det(self.rotation) < 0.0:
            raise DomainError("rotation must have determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")

    @property
    def forward(self):
        return self.rotation[:, 2]

    def camera_to_world(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.origin
        return m


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    pixel: tuple = (0, 0)
    jitter: tuple = (0.5, 0.5)


def pixel_directions(camera, i, j, u, v):
    """World-space unit directions for pixel/jitter arrays (vectorized)."""
    i = np.asarray(i, dtype=np.float64)
    x = (i + u - camera.cx) / camera.fx
    y = (np.asarray(j, dtype=np.float64) + v - camera.cy) / camera.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ camera.rotation.T


def _strata(n_sub):
    a = int(np.sqrt(n_sub))
    while n_sub % a:
        a -= 1
    return a, n_sub // a


def rays_for_pixel(camera, pixel, n_sub, rng=None):
    """n_sub stratified sub-rays through one pixel.

    rng=None pins each jitter to its stratum center (the n_sub=1 case is then
    the pixel-center ray). Each stratum of the a x b grid is hit exactly once.
    """
    i, j = pixel
    if not (0 <= i < camera.width and 0 <= j < camera.height):
        raise DomainError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    if n_sub < 1:
        raise DomainError("n_sub must be >= 1")
    a, b = _strata(n_sub)
    rays = []
    for p in range(a):
        for q in range(b):
            du = 0.5 if rng is None else rng.random()
            dv = 0.5 if rng is None else rng.random()
            u = (p + du) / a
            v = (q + dv) / b
            d = pixel_directions(camera, np.float64(i), np.float64(j),
                                 np.float64(u), np.float64(v))
            rays.append(Ray(camera.origin.copy(), d, (i, j), (u, v)))
    return rays


def mean_focus_point(poses):
    """Least-squares closest point to all camera forward axes.

    Solves [sum (I - a a^T)] p = sum (I - a a^T) o over the poses; the normal
    matrix is singular iff all axes are parallel.
    """
    if len(poses) < 2:
        raise DomainError("need at least 2 poses")
    M = np.zeros((3, 3))
    rhs = np.zeros(3)
    for pose in poses:
        a = pose.forward
        P = np.eye(3) - np.outer(a, a)
        M += P
        rhs += P @ pose.origin
    ev = np.linalg.eigvalsh(M)
    if ev[0] < 1e-9 * max(ev[-1], 1.0):
        raise DegenerateConfigError("all optical axes are parallel")
    return np.linalg.solve(M, rhs)


def look_at(origin, target):
    """World-from-camera rotation looking from origin to target.

    Up is world +z; if the view direction is within 1e-6 of +-z the up vector
    falls back to +x. Camera y points downward (x right, y down, z forward).
    """
    f = np.asarray(target, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise DegenerateConfigError("look_at target coincides with origin")
    f = f / n
    z = np.array([0.0, 0.0, 1.0])
    up = z if min(np.linalg.norm(f - z), np.linalg.norm(f + z)) >= 1e-6 \
        else np.array([1.0, 0.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return np.column_stack([x, y, f])


def sample_unseen_camera(poses, rng):
    """Random pose on the bounding sphere of the training cameras.

    The sphere is centered at the mean focus point with radius the average
    focus-to-camera distance; the sampled pose looks at the focus point and
    copies the first pose's intrinsics.
    """
    focus = mean_focus_point(poses)
    radius = float(np.mean([np.linalg.norm(p.origin - focus) for p in poses]))
    while True:
        d = rng.standard_normal(3)
        n = np.linalg.norm(d)
        if n > 1e-12:
            break
    origin = focus + radius * d / n
    first = poses[0]
    return CameraPose(look_at(origin, focus), origin, first.fx, first.fy,
                      first.cx, first.cy, first.width, first.height)
