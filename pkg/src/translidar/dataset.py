"""Dataset and experiment-config serialization.

Layout of a dataset directory:

    manifest.json            scene, view table, bin geometry, pulse, labels
    pose_XX.json             camera-to-world matrix + intrinsics
    transient_XX.bin         float32 H*W*T cube ("TRNS" header)
    mask_XX.bin              uint8 H*W*1 occupancy mask (same header)
    oracle/depth_XX.bin      float32 H*W*1 ground-truth depths (evaluation only;
                             training must never read this directory)

Binary files carry magic "TRNS", a version, and H, W, T as little-endian
uint32, then the payload x-fastest (C order). Manifests and configs are JSON
with sorted keys; nothing in the files depends on paths or wall-clock time,
so a fixed seed reproduces byte-identical datasets.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (ConfigError, DatasetIoError, DatasetTruncatedError,
                     DatasetValidationError, DatasetVersionError, DomainError)
from .field import Box, Sphere, Torus
from .geometry import CameraPose
from .renderer import TransientImage

_BIN_MAGIC = b"TRNS"
_BIN_VERSION = 1

PHOTON_LEVELS = ("raw-flux", "6000", "1500", "300", "150", "50", "10")


# ---------------------------------------------------------------------------
# binary containers

def write_array_bin(path, arr, dtype):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DomainError("binary arrays must be H x W x T")
    try:
        with open(path, "wb") as fh:
            fh.write(_BIN_MAGIC)
            fh.write(np.array([_BIN_VERSION, *arr.shape], "<u4").tobytes())
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    except OSError as e:
        raise DatasetIoError(f"cannot write {path}: {e}") from e


def read_array_bin(path, dtype):
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DatasetIoError(f"missing dataset file: {path}") from e
    with fh:
        head = fh.read(20)
        if len(head) < 20:
            raise DatasetTruncatedError(f"{path}: truncated header")
        if head[:4] != _BIN_MAGIC:
            raise DatasetValidationError(f"{path}: bad magic {head[:4]!r}")
        version, h, w, t = np.frombuffer(head[4:], "<u4")
        if version != _BIN_VERSION:
            raise DatasetVersionError(f"{path}: unsupported version {version}")
        itemsize = np.dtype(dtype).itemsize
        payload = fh.read(int(h) * int(w) * int(t) * itemsize + 1)
        if len(payload) != int(h) * int(w) * int(t) * itemsize:
            raise DatasetTruncatedError(f"{path}: payload size mismatch")
    arr = np.frombuffer(payload, dtype=dtype).reshape(int(h), int(w), int(t))
    return arr.copy()


# ---------------------------------------------------------------------------
# poses

def write_pose(path, camera):
    doc = {"camera_to_world": camera.camera_to_world().tolist(),
           "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
           "width": camera.width, "height": camera.height}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_pose(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DatasetIoError(f"missing dataset file: {path}") from e
    except json.JSONDecodeError as e:
        raise DatasetValidationError(f"{path}: invalid JSON ({e})") from e
    try:
        m = np.asarray(doc["camera_to_world"], dtype=np.float64)
        if m.shape != (4, 4):
            raise DatasetValidationError(f"{path}: camera_to_world must be 4x4")
        return CameraPose(rotation=m[:3, :3], origin=m[:3, 3],
                          fx=float(doc["fx"]), fy=float(doc["fy"]),
                          cx=float(doc["cx"]), cy=float(doc["cy"]),
                          width=int(doc["width"]), height=int(doc["height"]))
    except KeyError as e:
        raise DatasetValidationError(f"{path}: missing field {e}") from e
    except DomainError as e:
        raise DatasetValidationError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# scene spec

_SCENE_ARITY = {"sphere": 5, "box": 7, "torus": 6}


def parse_scene(text, name="<scene>"):
    """Primitive-per-line scene format.

    sphere cx cy cz radius albedo
    box    cx cy cz hx hy hz albedo
    torus  cx cy cz major minor albedo
    """
    prims = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", line)]
        if tokens and tokens[0][0].startswith("#"):
            continue
        if not tokens:
            continue
        kind, col = tokens[0]
        kind = kind.lower()
        if kind not in _SCENE_ARITY:
            raise ConfigError(f"{name}:{lineno}:{col}: unknown primitive {kind!r}")
        want = _SCENE_ARITY[kind]
        if len(tokens) - 1 != want:
            raise ConfigError(f"{name}:{lineno}:{col}: {kind} takes {want} numbers, "
                              f"got {len(tokens) - 1}")
        vals = []
        for tok, tcol in tokens[1:]:
            try:
                vals.append(float(tok))
            except ValueError:
                raise ConfigError(f"{name}:{lineno}:{tcol}: not a number: {tok!r}")
        center = np.array(vals[:3])
        if kind == "sphere":
            if vals[3] <= 0:
                raise ConfigError(f"{name}:{lineno}:{col}: sphere radius must be > 0")
            prims.append(Sphere(center, vals[3], vals[4]))
        elif kind == "box":
            if min(vals[3:6]) <= 0:
                raise ConfigError(f"{name}:{lineno}:{col}: box half-extents must be > 0")
            prims.append(Box(center, np.array(vals[3:6]), vals[6]))
        else:
            if vals[3] <= 0 or vals[4] <= 0 or vals[4] >= vals[3]:
                raise ConfigError(f"{name}:{lineno}:{col}: torus needs 0 < minor < major")
            prims.append(Torus(center, vals[3], vals[4], vals[5]))
    return prims


def parse_scene_file(path):
    try:
        with open(path) as fh:
            return parse_scene(fh.read(), name=str(path))
    except OSError as e:
        raise DatasetIoError(f"cannot read scene spec {path}: {e}") from e


def scene_to_dicts(prims):
    out = []
    for p in prims:
        if isinstance(p, Sphere):
            out.append({"kind": "sphere", "center": list(map(float, p.center)),
                        "radius": float(p.radius), "albedo": float(p.albedo)})
        elif isinstance(p, Box):
            out.append({"kind": "box", "center": list(map(float, p.center)),
                        "half_extents": list(map(float, p.half_extents)),
                        "albedo": float(p.albedo)})
        elif isinstance(p, Torus):
            out.append({"kind": "torus", "center": list(map(float, p.center)),
                        "major_radius": float(p.major_radius),
                        "minor_radius": float(p.minor_radius),
                        "albedo": float(p.albedo)})
        else:
            raise DomainError(f"unknown primitive type {type(p).__name__}")
    return out


def scene_from_dicts(dicts):
    prims = []
    for d in dicts:
        kind = d.get("kind")
        if kind == "sphere":
            prims.append(Sphere(np.asarray(d["center"], dtype=np.float64),
                                float(d["radius"]), float(d.get("albedo", 1.0))))
        elif kind == "box":
            prims.append(Box(np.asarray(d["center"], dtype=np.float64),
                             np.asarray(d["half_extents"], dtype=np.float64),
                             float(d.get("albedo", 1.0))))
        elif kind == "torus":
            prims.append(Torus(np.asarray(d["center"], dtype=np.float64),
                               float(d["major_radius"]), float(d["minor_radius"]),
                               float(d.get("albedo", 1.0))))
        else:
            raise DatasetValidationError(f"unknown scene primitive kind {kind!r}")
    return prims


# ---------------------------------------------------------------------------
# manifest and dataset

@dataclass
class DatasetManifest:
    scene: list
    views: list                     # dicts: pose_file, transient_file, mask_file, split
    bin_width: float
    n_bins: int
    t0_offset: float
    near: float
    far: float
    pulse_taps: list
    photon_level: str
    seed: int
    exposure_scale: float = 1.0
    background_per_bin: float = 0.0

    def __post_init__(self):
        if str(self.photon_level) not in PHOTON_LEVELS:
            raise DatasetValidationError(
                f"photon_level must be one of {PHOTON_LEVELS}, got {self.photon_level!r}")
        if not (0 < self.near < self.far):
            raise DatasetValidationError("need 0 < near < far")
        if not self.bin_width > 0 or self.n_bins < 1:
            raise DatasetValidationError("need bin_width > 0 and n_bins >= 1")
        self.photon_level = str(self.photon_level)


@dataclass
class LoadedView:
    pose: CameraPose
    transient: TransientImage
    mask: np.ndarray
    split: str
    oracle_depth: Optional[np.ndarray] = None


@dataclass
class Dataset:
    manifest: DatasetManifest
    views: list
    root: str


def write_dataset(manifest, cubes, masks, poses, out_dir, oracle_depths=None):
    """Write the directory layout; view file names come from the manifest."""
    if not (len(cubes) == len(masks) == len(poses) == len(manifest.views)):
        raise DomainError("views, cubes, masks and poses must align")
    for cube, mask in zip(cubes, masks):
        if cube.data.shape[2] != manifest.n_bins:
            raise DomainError("cube bin count does not match the manifest")
        if mask.shape != cube.data.shape[:2]:
            raise DomainError("mask shape does not match its cube")
    try:
        os.makedirs(out_dir, exist_ok=True)
        if oracle_depths is not None:
            os.makedirs(os.path.join(out_dir, "oracle"), exist_ok=True)
    except OSError as e:
        raise DatasetIoError(f"cannot create {out_dir}: {e}") from e

    for i, (view, cube, mask, pose) in enumerate(zip(manifest.views, cubes,
                                                     masks, poses)):
        write_array_bin(os.path.join(out_dir, view["transient_file"]),
                        cube.data, "<f4")
        write_array_bin(os.path.join(out_dir, view["mask_file"]),
                        mask.astype(np.uint8), "u1")
        write_pose(os.path.join(out_dir, view["pose_file"]), pose)
        if oracle_depths is not None:
            write_array_bin(os.path.join(out_dir, "oracle", f"depth_{i:02d}.bin"),
                            oracle_depths[i].astype(np.float64), "<f4")
    doc = dataclasses.asdict(manifest)
    try:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise DatasetIoError(f"cannot write manifest: {e}") from e


def read_dataset(root, with_oracle=True):
    """Load and validate a dataset directory."""
    man_path = os.path.join(root, "manifest.json")
    try:
        with open(man_path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DatasetIoError(f"missing dataset file: {man_path}") from e
    except json.JSONDecodeError as e:
        raise DatasetValidationError(f"{man_path}: invalid JSON ({e})") from e
    try:
        manifest = DatasetManifest(**doc)
    except TypeError as e:
        raise DatasetValidationError(f"{man_path}: {e}") from e

    views = []
    for i, v in enumerate(manifest.views):
        pose = read_pose(os.path.join(root, v["pose_file"]))
        cube = read_array_bin(os.path.join(root, v["transient_file"]), "<f4")
        mask = read_array_bin(os.path.join(root, v["mask_file"]), "u1")
        if cube.shape[2] != manifest.n_bins:
            raise DatasetValidationError(
                f"{v['transient_file']}: {cube.shape[2]} bins, manifest says {manifest.n_bins}")
        if mask.shape[:2] != cube.shape[:2] or mask.shape[2] != 1:
            raise DatasetValidationError(f"{v['mask_file']}: shape mismatch")
        if (cube.shape[0], cube.shape[1]) != (pose.height, pose.width):
            raise DatasetValidationError(
                f"{v['transient_file']}: cube is {cube.shape[:2]}, pose says "
                f"{(pose.height, pose.width)}")
        transient = TransientImage(cube.astype(np.float64), manifest.bin_width,
                                   manifest.t0_offset, view=pose,
                                   exposure_scale=manifest.exposure_scale)
        oracle = None
        opath = os.path.join(root, "oracle", f"depth_{i:02d}.bin")
        if with_oracle and os.path.exists(opath):
            oracle = read_array_bin(opath, "<f4")[:, :, 0].astype(np.float64)
        views.append(LoadedView(pose, transient, mask[:, :, 0].astype(bool),
                                v.get("split", "train"), oracle))
    return Dataset(manifest, views, str(root))


# ---------------------------------------------------------------------------
# experiment configuration

@dataclass
class ExperimentConfig:
    seed: int = 0
    total_steps: int = 10000
    batch_rays: int = 512
    unseen_rays: int = 128
    n_samples: int = 64
    n_sub: int = 1
    warmup_steps: Optional[int] = None
    lr_start: float = 1e-5
    lr_peak: float = 1e-3
    decay_factor: float = 0.01
    grid_resolutions: tuple = (16, 24, 32, 48, 64, 96)
    initial_levels: int = 4
    levels_per_unlock: int = 2
    unlock_interval: int = 5000
    init_radius: float = 0.75
    lambda_ref: Optional[float] = None     # None -> photon-level lookup
    # a bare scalar under Adam moves at ~lr per step, far too slow for the
    # sharpness to anneal over a run; give it its own lr group
    s_lr_scale: float = 10.0
    lambda_sc: float = 7e-3
    lambda_eik: float = 1e-5
    lambda_weight_var: float = 1e-3
    lambda_sparse: float = 3e-7
    alpha_sparse: float = 100.0
    eval_interval: int = 500
    checkpoint_interval: int = 2000
    log_interval: int = 50
    near: Optional[float] = None
    far: Optional[float] = None

    def __post_init__(self):
        self.grid_resolutions = tuple(int(r) for r in self.grid_resolutions)
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.batch_rays < 1 or self.unseen_rays < 1:
            raise ConfigError("batch_rays and unseen_rays must be >= 1")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if not (1 <= self.initial_levels <= len(self.grid_resolutions)):
            raise ConfigError("initial_levels out of range")
        if self.levels_per_unlock < 0 or self.unlock_interval < 1:
            raise ConfigError("bad coarse-to-fine schedule")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")
        if not self.init_radius > 0:
            raise ConfigError("init_radius must be > 0")


def config_from_file(path):
    """Read an ExperimentConfig from JSON; unknown keys are fatal."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DatasetIoError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**doc)


# ---------------------------------------------------------------------------
# pose rings for simulation

def _ring_pose(azimuth, elevation, distance, width, height, focal,
               target=np.zeros(3)):
    from .geometry import look_at
    d = np.array([np.cos(azimuth) * np.cos(elevation),
                  np.sin(azimuth) * np.cos(elevation),
                  np.sin(elevation)])
    origin = target + distance * d
    rot = look_at(origin, target)
    return CameraPose(rotation=rot, origin=origin, fx=focal, fy=focal,
                      cx=width / 2.0, cy=height / 2.0, width=width, height=height)


def ring_poses(n_train, distance=4.0, width=32, height=32, n_heldout=2,
               elevation_deg=20.0, heldout_elevation_deg=35.0,
               bounding_radius=1.5, margin=1.1):
    """Training views on a circle plus offset raised held-out views, all
    looking at the origin, focal length fitted to the bounding sphere."""
    if n_train < 1:
        raise DomainError("need at least one training view")
    b = bounding_radius * margin
    if not b < distance:
        raise DomainError("camera ring must lie outside the bounding sphere")
    tan_half = b / np.sqrt(distance * distance - b * b)
    focal = (min(width, height) / 2.0) / tan_half
    el = np.deg2rad(elevation_deg)
    train = [_ring_pose(2.0 * np.pi * k / n_train, el, distance, width, height,
                        focal) for k in range(n_train)]
    el_h = np.deg2rad(heldout_elevation_deg)
    held = [_ring_pose(np.pi / n_train + 2.0 * np.pi * k / max(1, n_heldout),
                       el_h, distance, width, height, focal)
            for k in range(n_heldout)]
    return train, held
