"""Reconstruction evaluation.

Classical depth from count histograms (log-matched filtering), depth-map
normals, the transient-overlap score, PSNR, masked depth L1, zero-level-set
meshing, and symmetric Chamfer distance between sampled surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .autodiff import conv_shift
from .errors import DomainError
from .field import sdf_eval_many, voxel_size
from .geometry import pixel_directions

MATCH_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# log-matched filter depth

class MatchedDepth(NamedTuple):
    bin: int
    distance: float
    no_depth: bool


def _match_taps(pulse, floor):
    if not floor > 0:
        raise DomainError("floor must be positive")
    # baseline-subtracted log taps: correlating with ln(p + floor) shifted so
    # empty overlap scores 0, which keeps boundary shifts comparable
    return np.log(pulse.taps + floor) - np.log(floor)


def _match_scores(counts, pulse, floor):
    g = _match_taps(pulse, floor)
    return conv_shift(counts, g[::-1], g.size - 1)


def _shift_to_distance(shift, pulse, bin_width, t0_offset):
    return (t0_offset + (shift + pulse.peak + 0.5) * bin_width) / 2.0


def log_matched_depth(transient, pulse, bin_width, t0_offset, floor=MATCH_FLOOR):
    """Depth of one count histogram by maximum log-correlation shift.

    Ties break toward the smallest shift; an all-zero histogram has no depth.
    """
    counts = np.asarray(transient, dtype=np.float64)
    if counts.ndim != 1:
        raise DomainError("need a 1-D count histogram")
    if not counts.any():
        return MatchedDepth(0, float("nan"), True)
    scores = _match_scores(counts, pulse, floor)
    m = int(np.argmax(scores))
    return MatchedDepth(m, _shift_to_distance(m, pulse, bin_width, t0_offset), False)


def log_matched_depth_map(cube, pulse, bin_width, t0_offset, floor=MATCH_FLOOR):
    """Vectorized per-pixel matched-filter depths; returns (depth, valid)."""
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3:
        raise DomainError("need an H x W x T cube")
    scores = _match_scores(cube, pulse, floor)
    shift = np.argmax(scores, axis=-1)
    depth = _shift_to_distance(shift, pulse, bin_width, t0_offset)
    valid = cube.sum(axis=-1) > 0
    depth = np.where(valid, depth, np.nan)
    return depth, valid


# ---------------------------------------------------------------------------
# normals from depth

def normals_from_depth(depth, camera, valid=None):
    """Unit normals of the back-projected depth point cloud.

    The stencil at output pixel (r+1, c+1) differences the cloud at
    (r, c+2)-(r, c) horizontally and (r+2, c)-(r, c) vertically; pixels whose
    stencil touches an invalid or border tap are masked out.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    if valid is None:
        valid = np.isfinite(depth)
    else:
        valid = np.asarray(valid, dtype=bool) & np.isfinite(depth)
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dirs = pixel_directions(camera, ii.ravel(), jj.ravel(),
                            np.full(ii.size, 0.5), np.full(ii.size, 0.5))
    pc = camera.origin + np.nan_to_num(depth).ravel()[:, None] * dirs
    pc = pc.reshape(H, W, 3)

    normals = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return normals, ok
    gx = 0.5 * (pc[:, 2:] - pc[:, :-2])[:-2, :]      # rows r, cols c..c+2
    gy = 0.5 * (pc[2:, :] - pc[:-2, :])[:, :-2]      # rows r..r+2, cols c
    n = np.cross(gx, gy)
    norm = np.linalg.norm(n, axis=-1)
    good = (valid[:-2, :-2] & valid[:-2, 2:] & valid[2:, :-2]
            & valid[1:-1, 1:-1] & (norm > 1e-12))
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[..., None]
    normals[1:-1, 1:-1][good] = n[good]
    ok[1:-1, 1:-1] = good
    return normals, ok


# ---------------------------------------------------------------------------
# image / transient scores

def _cube_array(x):
    # TransientImage or bare array; ndarray.data is a memoryview, skip it
    inner = getattr(x, "data", None)
    if isinstance(inner, np.ndarray):
        return inner
    return np.asarray(x, dtype=np.float64)


def transient_iou(a, b):
    """Sum of elementwise minima over sum of elementwise maxima."""
    da = _cube_array(a)
    db = _cube_array(b)
    if da.shape != db.shape:
        raise DomainError("transient shapes differ")
    if np.any(da < 0) or np.any(db < 0):
        raise DomainError("transients must be non-negative")
    denom = np.maximum(da, db).sum()
    if denom == 0.0:
        return 1.0
    return float(np.minimum(da, db).sum() / denom)


def psnr(a, b, peak):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError("image shapes differ")
    if not peak > 0:
        raise DomainError("peak must be positive")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def l1_depth_masked(pred, ref, mask):
    """Mean |pred - ref| over the mask; empty mask flags as NaN."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    return float(np.abs(pred[mask] - ref[mask]).mean())


# ---------------------------------------------------------------------------
# meshing

@dataclass
class TriangleMesh:
    vertices: np.ndarray      # (V, 3)
    triangles: np.ndarray     # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise DomainError("triangle indices out of range")

    @property
    def is_empty(self):
        return self.triangles.shape[0] == 0


def triangle_areas(mesh):
    v = mesh.vertices
    t = mesh.triangles
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)


def extract_mesh(fld, resolution, iso=0.0):
    """Marching cubes over the bounding cube; strictly one-signed fields
    yield an empty (flagged) mesh."""
    if resolution < 8:
        raise DomainError("need resolution >= 8")
    br = fld.bounding_radius
    c = np.linspace(-br, br, resolution)
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)
    volume = sdf_eval_many(fld, pts).reshape(resolution, resolution, resolution)
    h = voxel_size(resolution, br)
    try:
        verts, faces, _, _ = marching_cubes(volume, level=iso, spacing=(h, h, h))
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mesh = TriangleMesh(verts - br, faces)
    keep = triangle_areas(mesh) > 1e-12
    return TriangleMesh(mesh.vertices, mesh.triangles[keep])


def sample_mesh_points(mesh, n, rng):
    """Area-weighted uniform surface samples."""
    if mesh.is_empty:
        raise DomainError("cannot sample an empty mesh")
    areas = triangle_areas(mesh)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = rng.random(n)
    r2 = rng.random(n)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    v = mesh.vertices
    t = mesh.triangles[tri]
    return (v[t[:, 0]]
            + r1[:, None] * (v[t[:, 1]] - v[t[:, 0]])
            + r2[:, None] * (v[t[:, 2]] - v[t[:, 0]]))


def chamfer_distance(points_a, points_b):
    """Symmetric mean nearest-neighbor Euclidean distance."""
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise DomainError("point sets must be non-empty")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


# ---------------------------------------------------------------------------
# mesh export

def write_ply(mesh, path):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def write_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
