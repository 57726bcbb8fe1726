"""Training objectives.

Transient-domain data terms (per-ray L1 on binned transients and on their
bin sums), the unseen-view weight-variance regularizer, space carving on
below-background bins, Eikonal and sparsity field regularizers, and the
baseline photometric / HDR / depth-TV objectives.

Each loss has a plain-numpy form (oracle-friendly, works on RaySamples and
arrays) and, where training needs gradients, a `_nodes` twin operating on
taped march outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .errors import DomainError
from .field import sdf_eval_many
from .renderer import round_trip_bins

# lambda_ref is raised at low photon counts; other weights are level-free
LAMBDA_REF_BY_LEVEL = {"300": 5e-3, "150": 5e-3, "50": 6e-3, "10": 2e-2}
LAMBDA_REF_DEFAULT = 3e-3


@dataclass
class LossWeights:
    lambda_ref: float = LAMBDA_REF_DEFAULT
    lambda_sc: float = 7e-3
    lambda_eik: float = 1e-5
    lambda_weight_var: float = 1e-3
    lambda_sparse: float = 3e-7
    alpha_sparse: float = 100.0

    def __post_init__(self):
        for name in ("lambda_ref", "lambda_sc", "lambda_eik",
                     "lambda_weight_var", "lambda_sparse"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if not self.alpha_sparse > 0:
            raise DomainError("alpha_sparse must be positive")


def lambda_ref_for_photon_level(photon_level):
    return LAMBDA_REF_BY_LEVEL.get(str(photon_level), LAMBDA_REF_DEFAULT)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# transient data terms

def loss_transient_l1(rendered, measured):
    """Per-ray L1 over bins, averaged over the ray batch."""
    rendered = np.asarray(rendered, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    _check_shapes(rendered, measured)
    return float(np.abs(measured - rendered).sum(axis=-1).mean())


def loss_transient_l1_nodes(rendered, measured):
    _check_shapes(rendered.value, measured)
    return ad.amean(ad.asum(ad.absolute(measured - rendered), axis=1))


def loss_reflectivity(rendered, measured):
    """L1 between per-ray bin sums (integrated intensity)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    _check_shapes(rendered, measured)
    return float(np.abs(rendered.sum(axis=-1) - measured.sum(axis=-1)).mean())


def loss_reflectivity_nodes(rendered, measured):
    _check_shapes(rendered.value, measured)
    return ad.amean(ad.absolute(ad.asum(rendered, axis=1) - measured.sum(axis=-1)))


# ---------------------------------------------------------------------------
# weight variance around the argmax depth (unseen views)

def _weight_var_coeffs(t, prev, d):
    """Exact integral of (x - d)^2 over [t_{i-1}, t_i], divided by the
    interval length: ((t_i-d)^3 - (t_{i-1}-d)^3) / (3 * delta)."""
    delta = np.maximum(t - prev, 1e-12)
    return ((t - d) ** 3 - (prev - d) ** 3) / (3.0 * delta)


def loss_weight_variance(samples_list):
    """Second moment of the one-way weights about the argmax depth, averaged
    over rays; no-surface rays contribute zero."""
    if not samples_list:
        raise DomainError("need at least one ray")
    total = 0.0
    for s in samples_list:
        w = s.weight_reg
        if not np.any(w > 0):
            continue
        d = s.t[np.argmax(w)]
        prev = np.concatenate([[s.near], s.t[:-1]])
        total += float((w * _weight_var_coeffs(s.t, prev, d)).sum())
    return total / len(samples_list)


def loss_weight_variance_nodes(march):
    w_val = march.weight_reg.value
    R = w_val.shape[0]
    # argmax depth is treated as a constant (detached) per ray
    d = march.t[np.arange(R), np.argmax(w_val, axis=1)][:, None]
    prev = np.concatenate([np.full((R, 1), march.near), march.t[:, :-1]], axis=1)
    coef = _weight_var_coeffs(march.t, prev, d)
    coef[~(w_val > 0).any(axis=1)] = 0.0
    return ad.asum(march.weight_reg * coef) * (1.0 / R)


# ---------------------------------------------------------------------------
# space carving on below-background bins

def flagged_bins(measured, background):
    return np.asarray(measured) < background


def loss_space_carving(samples_list, measured, background, bin_width, t0_offset):
    """Total one-way mass T*alpha landing in bins whose measured transient
    sits below the background level."""
    measured = np.asarray(measured, dtype=np.float64)
    if measured.ndim != 2 or len(samples_list) != measured.shape[0]:
        raise DomainError("need one measured transient row per ray")
    flags = flagged_bins(measured, background)
    n_bins = measured.shape[1]
    total = 0.0
    for s, frow in zip(samples_list, flags):
        bins = round_trip_bins(s.t, bin_width, t0_offset)
        ok = (bins >= 0) & (bins < n_bins)
        mass = np.bincount(bins[ok], weights=(s.trans * s.alpha)[ok],
                           minlength=n_bins)
        total += float((mass * frow).sum())
    return total


def loss_space_carving_nodes(transients, measured, background):
    flags = flagged_bins(measured, background).astype(np.float64)
    _check_shapes(transients.mass_oneway.value, flags)
    return ad.asum(transients.mass_oneway * flags)


# ---------------------------------------------------------------------------
# field regularizers

def loss_eikonal(fld, points, eps=1e-4):
    """Mean squared deviation of the finite-difference gradient norm from 1."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0:
        raise DomainError("need a non-empty point batch")
    eye = np.eye(3)
    offs = np.concatenate([eps * eye, -eps * eye], axis=0)
    vals = sdf_eval_many(fld, points[None, :, :] + offs[:, None, :])
    g = (vals[:3] - vals[3:]) / (2.0 * eps)
    norm = np.sqrt((g * g).sum(axis=0))
    return float(((norm - 1.0) ** 2).mean())


def loss_eikonal_nodes(grad_norm):
    return ad.amean((grad_norm - 1.0) ** 2)


def loss_sparsity(fld, points, alpha_sparse):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0:
        raise DomainError("need a non-empty point batch")
    if not alpha_sparse > 0:
        raise DomainError("alpha_sparse must be positive")
    return float(np.exp(-alpha_sparse * np.abs(sdf_eval_many(fld, points))).mean())


def loss_sparsity_nodes(f_center, alpha_sparse):
    return ad.amean(ad.exp(ad.absolute(f_center) * (-alpha_sparse)))


# ---------------------------------------------------------------------------
# combination

def loss_total(l_transient, l_reflectivity, l_space_carving, l_eikonal,
               l_weight_variance, l_sparsity, weights):
    """Weighted sum of the six training terms; works on floats and on taped
    nodes alike."""
    return (l_transient
            + weights.lambda_ref * l_reflectivity
            + weights.lambda_sc * l_space_carving
            + weights.lambda_eik * l_eikonal
            + weights.lambda_weight_var * l_weight_variance
            + weights.lambda_sparse * l_sparsity)


# ---------------------------------------------------------------------------
# baseline objectives

def loss_hdr_transient(rendered, measured):
    """L1 between log1p-compressed transients, averaged over rays."""
    rendered = np.asarray(rendered, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    _check_shapes(rendered, measured)
    if np.any(rendered < 0) or np.any(measured < 0):
        raise DomainError("transients must be non-negative")
    diff = np.abs(np.log1p(measured) - np.log1p(rendered))
    return float(diff.sum(axis=-1).mean())


def loss_hdr_transient_nodes(rendered, measured):
    _check_shapes(rendered.value, measured)
    if np.any(rendered.value < 0) or np.any(measured < 0):
        raise DomainError("transients must be non-negative")
    diff = ad.absolute(np.log1p(measured) - ad.log1p(rendered))
    return ad.amean(ad.asum(diff, axis=1))


class PhotometricLoss(NamedTuple):
    value: object            # float or Node
    empty: bool


def loss_photometric(rendered, measured, active):
    """Mean squared intensity error over the active rays."""
    rendered = np.asarray(rendered, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    _check_shapes(rendered, measured)
    active = np.asarray(active, dtype=bool)
    if active.shape != rendered.shape[:1]:
        raise DomainError("active mask must be per-ray")
    if not active.any():
        return PhotometricLoss(0.0, True)
    sq = (measured[active] - rendered[active]) ** 2
    if sq.ndim > 1:
        sq = sq.sum(axis=-1)
    return PhotometricLoss(float(sq.mean()), False)


def loss_photometric_nodes(rendered, measured, active):
    active = np.asarray(active, dtype=bool)
    if not active.any():
        return PhotometricLoss(0.0, True)
    idx = active.nonzero()[0]
    diff = measured[idx] - rendered[idx]
    sq = diff * diff
    if sq.value.ndim > 1:
        sq = ad.asum(sq, axis=1)
    return PhotometricLoss(ad.amean(sq), False)


def loss_depth_tv(patch):
    """Squared horizontal + vertical neighbor differences on an 8x8 patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (8, 8):
        raise DomainError("depth patch must be 8x8")
    h = patch[:, 1:] - patch[:, :-1]
    v = patch[1:, :] - patch[:-1, :]
    return float((h ** 2).sum() + (v ** 2).sum())


def loss_depth_tv_nodes(patch):
    if patch.value.shape != (8, 8):
        raise DomainError("depth patch must be 8x8")
    h = patch[:, 1:] - patch[:, :-1]
    v = patch[1:, :] - patch[:-1, :]
    return ad.asum(h * h) + ad.asum(v * v)
