"""Camera, ray, and unseen-viewpoint sampling tests.

Oracles here are all closed-form or brute-force: the principal ray of a
pinhole camera is the forward axis, stratified jitters partition the pixel,
and the mean focus point minimizes summed squared point-to-line distance,
which a nested grid refinement can minimize directly.
"""

import numpy as np
import pytest

from translidar import (CameraPose, DegenerateConfigError, DomainError,
                        look_at, mean_focus_point, pixel_directions,
                        rays_for_pixel, sample_unseen_camera)


def cam(rotation=None, origin=(0.0, 0.0, 0.0), fx=40.0, fy=40.0,
        cx=8.5, cy=8.5, width=17, height=17):
    R = np.eye(3) if rotation is None else rotation
    return CameraPose(R, np.asarray(origin, dtype=np.float64),
                      fx, fy, cx, cy, width, height)


# ---------------------------------------------------------------------------
# CameraPose invariants

def test_pose_rejects_non_orthonormal_rotation():
    R = np.eye(3)
    R[0, 1] = 1e-3
    with pytest.raises(DomainError):
        cam(rotation=R)


def test_pose_rejects_reflection():
    R = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(DomainError):
        cam(rotation=R)


def test_pose_rejects_principal_point_outside_image():
    with pytest.raises(DomainError):
        cam(cx=17.0)
    with pytest.raises(DomainError):
        cam(fx=-1.0)


# ---------------------------------------------------------------------------
# rays_for_pixel

def test_principal_ray_is_forward_axis():
    # pixel (8,8) + jitter 0.5 lands exactly on the principal point (8.5, 8.5)
    c = cam()
    (ray,) = rays_for_pixel(c, (8, 8), 1, rng=None)
    assert np.allclose(ray.direction, c.forward, atol=1e-12)


def test_principal_ray_rotated_camera():
    R = look_at((0.0, 0.0, 0.0), (1.0, 2.0, 2.0))
    c = cam(rotation=R)
    (ray,) = rays_for_pixel(c, (8, 8), 1, rng=None)
    assert np.allclose(ray.direction, np.array([1.0, 2.0, 2.0]) / 3.0, atol=1e-12)


def test_all_rays_unit_norm():
    c = cam(rotation=look_at((1.0, -2.0, 0.5), (0.0, 0.0, 0.0)),
            origin=(1.0, -2.0, 0.5))
    rng = np.random.default_rng(3)
    for pix in [(0, 0), (16, 16), (5, 11)]:
        for ray in rays_for_pixel(c, pix, 4, rng=rng):
            assert abs(np.linalg.norm(ray.direction) - 1.0) < 1e-12


def test_stratified_jitters_cover_each_stratum_once():
    rng = np.random.default_rng(0)
    rays = rays_for_pixel(cam(), (3, 3), 4, rng=rng)
    assert len(rays) == 4
    jit = np.array([r.jitter for r in rays])
    assert len({tuple(j) for j in jit}) == 4
    # stratum of a jitter in the 2x2 grid
    strata = {(int(u * 2), int(v * 2)) for u, v in jit}
    assert strata == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_out_of_bounds_pixel_rejected():
    with pytest.raises(DomainError):
        rays_for_pixel(cam(), (17, 0), 1)
    with pytest.raises(DomainError):
        rays_for_pixel(cam(), (-1, 3), 1)


def test_jittered_rays_stay_within_pixel_footprint():
    # angular spread across one pixel is ~1/fx; sub-rays of the same pixel
    # must not differ by more than that footprint diagonal
    c = cam()
    rng = np.random.default_rng(9)
    rays = rays_for_pixel(c, (2, 12), 9, rng=rng)
    footprint = np.sqrt((1.0 / c.fx) ** 2 + (1.0 / c.fy) ** 2)
    for a in rays:
        for b in rays:
            ang = np.arccos(np.clip(a.direction @ b.direction, -1.0, 1.0))
            assert ang <= footprint + 1e-9


# ---------------------------------------------------------------------------
# mean_focus_point

def _pose_with_axis(origin, axis):
    return cam(rotation=look_at(origin, np.asarray(origin) + np.asarray(axis)),
               origin=origin)


def test_focus_point_of_intersecting_axes():
    P = np.array([0.3, -0.2, 1.1])
    a = _pose_with_axis([2.0, 0.0, 0.0], P - [2.0, 0.0, 0.0])
    b = _pose_with_axis([0.0, 3.0, -1.0], P - [0.0, 3.0, -1.0])
    assert np.allclose(mean_focus_point([a, b]), P, atol=1e-9)


def test_focus_point_of_ring_is_center():
    center = np.array([0.5, 0.5, 0.0])
    poses = []
    for k in range(6):
        th = 2 * np.pi * k / 6
        o = center + 3.0 * np.array([np.cos(th), np.sin(th), 0.1 * (-1) ** k])
        poses.append(_pose_with_axis(o, center - o))
    assert np.allclose(mean_focus_point(poses), center, atol=1e-9)


def test_focus_point_matches_grid_refinement():
    rng = np.random.default_rng(4)
    poses = [_pose_with_axis(rng.normal(size=3) * 2.0, rng.normal(size=3))
             for _ in range(3)]

    def objective(p):
        tot = 0.0
        for pose in poses:
            d = p - pose.origin
            tot += d @ d - (d @ pose.forward) ** 2
        return tot

    # nested grid refinement around the analytic answer's neighborhood
    lo, hi = np.full(3, -4.0), np.full(3, 4.0)
    best = None
    for _ in range(12):
        axes = [np.linspace(lo[k], hi[k], 11) for k in range(3)]
        vals = [(objective(np.array([x, y, z])), (x, y, z))
                for x in axes[0] for y in axes[1] for z in axes[2]]
        best = np.array(min(vals)[1])
        span = (hi - lo) / 10.0
        lo, hi = best - span, best + span
    assert np.allclose(mean_focus_point(poses), best, atol=1e-6)


def test_focus_point_order_invariant():
    rng = np.random.default_rng(11)
    poses = [_pose_with_axis(rng.normal(size=3), rng.normal(size=3))
             for _ in range(5)]
    a = mean_focus_point(poses)
    b = mean_focus_point(poses[::-1])
    assert np.allclose(a, b, atol=1e-12)


def test_parallel_axes_degenerate():
    a = _pose_with_axis([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    b = _pose_with_axis([0.0, 1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateConfigError):
        mean_focus_point([a, b])


def test_focus_point_needs_two_poses():
    with pytest.raises(DomainError):
        mean_focus_point([cam()])


# ---------------------------------------------------------------------------
# sample_unseen_camera

def _training_ring():
    center = np.zeros(3)
    poses = []
    for k in range(4):
        th = 2 * np.pi * k / 4 + 0.3
        o = center + np.array([4 * np.cos(th), 4 * np.sin(th), 1.0])
        poses.append(_pose_with_axis(o, center - o))
    return poses


def test_unseen_origin_on_construction_sphere():
    poses = _training_ring()
    focus = mean_focus_point(poses)
    radius = np.mean([np.linalg.norm(p.origin - focus) for p in poses])
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = sample_unseen_camera(poses, rng)
        assert abs(np.linalg.norm(p.origin - focus) - radius) < 1e-9


def test_unseen_camera_looks_at_focus():
    poses = _training_ring()
    focus = mean_focus_point(poses)
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = sample_unseen_camera(poses, rng)
        to_focus = focus - p.origin
        to_focus /= np.linalg.norm(to_focus)
        assert abs(p.forward @ to_focus - 1.0) < 1e-9
        # intrinsics copied from the first training pose
        assert (p.fx, p.fy, p.cx, p.cy) == (poses[0].fx, poses[0].fy,
                                            poses[0].cx, poses[0].cy)


def test_unseen_origins_uniform_on_sphere():
    poses = _training_ring()
    focus = mean_focus_point(poses)
    radius = np.mean([np.linalg.norm(p.origin - focus) for p in poses])
    rng = np.random.default_rng(0)
    n = 10 ** 4
    pts = np.array([sample_unseen_camera(poses, rng).origin for _ in range(n)])
    # per coordinate: mean 0 about focus, std radius/sqrt(3)
    se = radius / np.sqrt(3.0) / np.sqrt(n)
    dev = np.abs(pts.mean(axis=0) - focus)
    assert np.all(dev < 3.0 * se)
