"""Training objectives: closed-form cases, loop and quadrature oracles, and
agreement between the plain-numpy and taped forms."""

from types import SimpleNamespace

import numpy as np
import pytest

from translidar import (
    AnalyticSdf, DomainError, LossWeights, RaySamples, Sphere,
    grid_from_function, lambda_ref_for_photon_level, loss_depth_tv,
    loss_eikonal, loss_hdr_transient, loss_photometric, loss_reflectivity,
    loss_space_carving, loss_sparsity, loss_total, loss_transient_l1,
    loss_weight_variance,
)
from translidar import autodiff as ad
from translidar.losses import (
    _weight_var_coeffs, loss_depth_tv_nodes, loss_hdr_transient_nodes,
    loss_photometric_nodes, loss_reflectivity_nodes, loss_space_carving_nodes,
    loss_transient_l1_nodes, loss_weight_variance_nodes,
)


def ray_samples(t, w_reg, near=0.5, alpha=None, trans=None):
    t = np.asarray(t, dtype=np.float64)
    w = np.asarray(w_reg, dtype=np.float64)
    z = np.zeros_like(t)
    a = z if alpha is None else np.asarray(alpha, dtype=np.float64)
    tr = z if trans is None else np.asarray(trans, dtype=np.float64)
    return RaySamples(t, z, z, z, a, tr, z, w, near, t[-1] + 1.0)


# ---------------------------------------------------------------------------
# transient L1

def test_transient_l1_identity_zero():
    x = np.random.default_rng(0).uniform(size=(4, 16))
    assert loss_transient_l1(x, x) == 0.0


def test_transient_l1_single_entry():
    assert loss_transient_l1(np.array([[0.5]]), np.array([[0.8]])) == \
        pytest.approx(0.3)


def test_transient_l1_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(6, 20)), rng.uniform(size=(6, 20))
    want = np.mean([sum(abs(b[r, n] - a[r, n]) for n in range(20))
                    for r in range(6)])
    assert abs(loss_transient_l1(a, b) - want) < 1e-12


def test_transient_l1_shape_mismatch():
    with pytest.raises(DomainError):
        loss_transient_l1(np.zeros((2, 3)), np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# reflectivity

def test_reflectivity_shape_blind():
    a = np.array([[1.0, 2.0, 0.0]])
    b = np.array([[0.0, 0.0, 3.0]])   # same integral, different shape
    assert loss_reflectivity(a, b) == 0.0


def test_reflectivity_integral_difference():
    a = np.array([[1.0, 2.0]])        # integral 3
    b = np.array([[2.0, 3.0]])        # integral 5
    assert loss_reflectivity(a, b) == pytest.approx(2.0)


def test_reflectivity_loop_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(5, 12)), rng.uniform(size=(5, 12))
    want = np.mean([abs(a[r].sum() - b[r].sum()) for r in range(5)])
    assert abs(loss_reflectivity(a, b) - want) < 1e-12


# ---------------------------------------------------------------------------
# weight variance

def test_weight_var_coeff_midpoint_interval():
    # exact second moment of a uniform interval about its midpoint: delta^2/12
    t1, t0 = 2.0, 1.4
    d = 0.5 * (t0 + t1)
    c = _weight_var_coeffs(np.array([t1]), np.array([t0]), d)[0]
    assert c == pytest.approx((t1 - t0) ** 2 / 12.0, rel=1e-12)


def test_weight_variance_zero_weights():
    s = ray_samples([1.0, 1.5, 2.0], [0.0, 0.0, 0.0])
    assert loss_weight_variance([s]) == 0.0


def test_weight_variance_matches_quadrature():
    # piecewise-constant density w_i/delta_i over [t_{i-1}, t_i]: the loss must
    # equal the exact integral of w(t) (t-d)^2 dt
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(1.0, 3.0, size=12))
    w = rng.uniform(size=12)
    near = 0.9
    s = ray_samples(t, w, near=near)
    d = t[np.argmax(w)]
    prev = np.concatenate([[near], t[:-1]])
    total = 0.0
    for i in range(12):
        xs = np.linspace(prev[i], t[i], 20001)
        dens = w[i] / (t[i] - prev[i])
        total += np.trapezoid(dens * (xs - d) ** 2, xs)
    assert abs(loss_weight_variance([s]) - total) < 1e-9


def test_weight_variance_decreases_toward_argmax():
    t = [1.0, 1.5, 2.0, 2.5, 3.0]
    far_mass = ray_samples(t, [0.0, 0.0, 1.0, 0.0, 0.5])
    near_mass = ray_samples(t, [0.0, 0.0, 1.0, 0.5, 0.0])
    assert loss_weight_variance([near_mass]) < loss_weight_variance([far_mass])


def test_weight_variance_rejects_empty_batch():
    with pytest.raises(DomainError):
        loss_weight_variance([])


# ---------------------------------------------------------------------------
# space carving

def test_space_carving_vacuum():
    s = ray_samples([1.0, 2.0], [0.0, 0.0])
    measured = np.zeros((1, 8))
    assert loss_space_carving([s], measured, 0.5, 0.5, 0.0) == 0.0


def test_space_carving_no_flagged_bins():
    s = ray_samples([1.0, 2.0], [0.0, 0.0],
                    alpha=[0.5, 0.5], trans=[1.0, 0.5])
    measured = np.full((1, 8), 10.0)
    assert loss_space_carving([s], measured, 0.5, 1.0, 0.0) == 0.0


def test_space_carving_single_flagged_sample():
    # T*alpha = 0.4 at t = 2 -> round-trip 4 -> bin 4 at width 1; only that
    # bin is below background
    s = ray_samples([2.0], [0.0], alpha=[0.8], trans=[0.5])
    measured = np.full((1, 8), 10.0)
    measured[0, 4] = 0.0
    out = loss_space_carving([s], measured, 0.5, 1.0, 0.0)
    assert out == pytest.approx(0.4)


def test_space_carving_row_count_mismatch():
    s = ray_samples([1.0], [0.0])
    with pytest.raises(DomainError):
        loss_space_carving([s], np.zeros((2, 4)), 0.5, 1.0, 0.0)


# ---------------------------------------------------------------------------
# field regularizers

def test_eikonal_analytic_sphere():
    fld = AnalyticSdf([Sphere(np.zeros(3), 1.0)])
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1.2, 1.2, size=(200, 3))
    pts = pts[np.linalg.norm(pts, axis=1) > 0.2]
    assert loss_eikonal(fld, pts) < 1e-6


def test_eikonal_flat_field_unit():
    fld = grid_from_function([16], 1.5, lambda p: np.zeros(p.shape[:-1]))
    pts = np.random.default_rng(5).uniform(-0.8, 0.8, size=(50, 3))
    assert loss_eikonal(fld, pts) == pytest.approx(1.0, abs=1e-9)


def test_eikonal_double_slope():
    fld = grid_from_function([16], 1.5, lambda p: 2.0 * p[..., 0])
    pts = np.random.default_rng(6).uniform(-0.5, 0.5, size=(50, 3))
    assert loss_eikonal(fld, pts) == pytest.approx(1.0, abs=1e-6)


def test_sparsity_cases():
    fld = AnalyticSdf([Sphere(np.zeros(3), 1.0)])
    on_surface = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert loss_sparsity(fld, on_surface, 100.0) == pytest.approx(1.0)
    far = np.array([[30.0, 0.0, 0.0]])
    assert loss_sparsity(fld, far, 100.0) < 1e-300
    shell = np.array([[1.01, 0.0, 0.0]])
    assert loss_sparsity(fld, shell, 100.0) == pytest.approx(np.exp(-1.0),
                                                            rel=1e-9)
    with pytest.raises(DomainError):
        loss_sparsity(fld, on_surface, 0.0)


# ---------------------------------------------------------------------------
# combination

def test_total_zero_terms():
    w = LossWeights()
    assert loss_total(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, w) == 0.0


def test_total_unit_terms_reference_weights():
    w = LossWeights(lambda_ref=3e-3, lambda_sc=7e-3, lambda_eik=1e-5,
                    lambda_weight_var=1e-3, lambda_sparse=3e-7)
    got = loss_total(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, w)
    assert got == pytest.approx(1.0 + 3e-3 + 7e-3 + 1e-5 + 1e-3 + 3e-7,
                                rel=1e-12)


def test_total_zero_weights_keeps_data_term():
    w = LossWeights(lambda_ref=0.0, lambda_sc=0.0, lambda_eik=0.0,
                    lambda_weight_var=0.0, lambda_sparse=0.0)
    assert loss_total(0.7, 5.0, 5.0, 5.0, 5.0, 5.0, w) == pytest.approx(0.7)


def test_total_linear_in_each_weight():
    base = dict(lambda_ref=1e-3, lambda_sc=1e-3, lambda_eik=1e-3,
                lambda_weight_var=1e-3, lambda_sparse=1e-3)
    terms = (0.5, 1.1, 0.9, 0.3, 0.8, 0.2)
    for key in base:
        lo = loss_total(*terms, LossWeights(**base))
        hi = loss_total(*terms, LossWeights(**{**base, key: 2e-3}))
        term_idx = ["lambda_ref", "lambda_sc", "lambda_eik",
                    "lambda_weight_var", "lambda_sparse"].index(key) + 1
        assert hi - lo == pytest.approx(1e-3 * terms[term_idx], rel=1e-9)


def test_lambda_ref_photon_lookup():
    assert lambda_ref_for_photon_level("300") == pytest.approx(5e-3)
    assert lambda_ref_for_photon_level("150") == pytest.approx(5e-3)
    assert lambda_ref_for_photon_level("50") == pytest.approx(6e-3)
    assert lambda_ref_for_photon_level("10") == pytest.approx(2e-2)


# ---------------------------------------------------------------------------
# baseline objectives

def test_hdr_cases():
    x = np.random.default_rng(7).uniform(size=(3, 10))
    assert loss_hdr_transient(x, x) == 0.0
    assert loss_hdr_transient(np.array([[0.0]]),
                              np.array([[np.e - 1.0]])) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        loss_hdr_transient(np.array([[-0.1]]), np.array([[0.0]]))


def test_hdr_loop_oracle():
    rng = np.random.default_rng(8)
    a, b = rng.uniform(size=(4, 9)), rng.uniform(size=(4, 9))
    want = np.mean([sum(abs(np.log1p(b[r, n]) - np.log1p(a[r, n]))
                        for n in range(9)) for r in range(4)])
    assert abs(loss_hdr_transient(a, b) - want) < 1e-12


def test_photometric_cases():
    x = np.random.default_rng(9).uniform(size=(5, 3))
    act = np.ones(5, dtype=bool)
    assert loss_photometric(x, x, act).value == 0.0
    one = loss_photometric(np.zeros((1, 3)), np.array([[0.1, 0.0, 0.0]]),
                           np.array([True]))
    assert one.value == pytest.approx(0.01)
    empty = loss_photometric(x, x, np.zeros(5, dtype=bool))
    assert empty.empty and empty.value == 0.0


def test_photometric_loop_oracle():
    rng = np.random.default_rng(10)
    a, b = rng.uniform(size=(6, 3)), rng.uniform(size=(6, 3))
    act = np.array([True, False, True, True, False, True])
    rows = [((b[r] - a[r]) ** 2).sum() for r in range(6) if act[r]]
    assert loss_photometric(a, b, act).value == pytest.approx(np.mean(rows),
                                                              rel=1e-12)


def test_depth_tv_cases():
    assert loss_depth_tv(np.full((8, 8), 3.0)) == 0.0
    h = 0.25
    ramp = np.tile(np.arange(8) * h, (8, 1))
    assert loss_depth_tv(ramp) == pytest.approx(8 * 7 * h * h, rel=1e-12)
    with pytest.raises(DomainError):
        loss_depth_tv(np.zeros((4, 4)))


def test_depth_tv_loop_oracle():
    rng = np.random.default_rng(11)
    p = rng.uniform(size=(8, 8))
    want = 0.0
    for j in range(8):
        for i in range(8):
            if i + 1 < 8:
                want += (p[j, i + 1] - p[j, i]) ** 2
            if j + 1 < 8:
                want += (p[j + 1, i] - p[j, i]) ** 2
    assert abs(loss_depth_tv(p) - want) < 1e-12


# ---------------------------------------------------------------------------
# taped twins agree with the numpy forms and with finite differences

def fd_leaf_grad(build, x0, eps=1e-6):
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat, gf = x0.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = build(x0)
        flat[i] = old - eps
        lo = build(x0)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def taped_grad(nodes_fn, x0):
    tape = ad.Tape()
    leaf = tape.leaf(np.array(x0, dtype=np.float64), "x")
    out = nodes_fn(leaf)
    return float(out.value), ad.backward(tape, out)["x"]


@pytest.mark.parametrize("numpy_fn,nodes_fn", [
    (lambda r, m: loss_transient_l1(r, m), loss_transient_l1_nodes),
    (lambda r, m: loss_reflectivity(r, m), loss_reflectivity_nodes),
    (lambda r, m: loss_hdr_transient(r, m), loss_hdr_transient_nodes),
])
def test_nodes_twins_match_and_differentiate(numpy_fn, nodes_fn):
    rng = np.random.default_rng(12)
    measured = rng.uniform(0.1, 1.0, size=(4, 10))
    rendered = rng.uniform(0.1, 1.0, size=(4, 10))
    val, got = taped_grad(lambda leaf: nodes_fn(leaf, measured), rendered)
    assert val == pytest.approx(numpy_fn(rendered, measured), rel=1e-12)
    want = fd_leaf_grad(lambda x: numpy_fn(x, measured), rendered)
    assert np.abs(got - want).max() < 1e-6


def test_weight_variance_nodes_matches_numpy():
    rng = np.random.default_rng(13)
    R, S = 3, 10
    t = np.sort(rng.uniform(1.0, 3.0, size=(R, S)), axis=1)
    w = rng.uniform(size=(R, S))
    w[1] = 0.0                       # one no-surface ray
    near = 0.9
    samples = [ray_samples(t[r], w[r], near=near) for r in range(R)]
    want = loss_weight_variance(samples)

    tape = ad.Tape()
    leaf = tape.leaf(w, "w")
    march = SimpleNamespace(weight_reg=leaf, t=t, near=near)
    out = loss_weight_variance_nodes(march)
    assert float(out.value) == pytest.approx(want, rel=1e-12)
    g = ad.backward(tape, out)["w"]
    assert g.shape == w.shape
    assert np.array_equal(g[1], np.zeros(S))    # no-surface ray contributes 0


def test_space_carving_nodes_matches_numpy():
    rng = np.random.default_rng(14)
    R, n_bins = 2, 12
    bin_width, t0 = 0.5, 1.0
    t = np.sort(rng.uniform(1.0, 3.0, size=(R, 8)), axis=1)
    alpha = rng.uniform(0.0, 0.5, size=(R, 8))
    trans = np.cumprod(1 - alpha, axis=1) / (1 - alpha)
    measured = rng.uniform(size=(R, n_bins)) * 4.0
    samples = [ray_samples(t[r], np.zeros(8), alpha=alpha[r], trans=trans[r])
               for r in range(R)]
    want = loss_space_carving(samples, measured, 2.0, bin_width, t0)

    from translidar.renderer import round_trip_bins
    mass = np.zeros((R, n_bins))
    for r in range(R):
        bins = round_trip_bins(t[r], bin_width, t0)
        ok = (bins >= 0) & (bins < n_bins)
        np.add.at(mass[r], bins[ok], (trans[r] * alpha[r])[ok])
    tape = ad.Tape()
    leaf = tape.leaf(mass, "m")
    out = loss_space_carving_nodes(SimpleNamespace(mass_oneway=leaf),
                                   measured, 2.0)
    assert float(out.value) == pytest.approx(want, rel=1e-12)


def test_photometric_and_tv_nodes_match():
    rng = np.random.default_rng(15)
    a, b = rng.uniform(size=(5, 3)), rng.uniform(size=(5, 3))
    act = np.array([True, True, False, True, True])
    tape = ad.Tape()
    leaf = tape.leaf(a, "a")
    out = loss_photometric_nodes(leaf, b, act)
    assert float(out.value.value) == pytest.approx(
        loss_photometric(a, b, act).value, rel=1e-12)

    p = rng.uniform(size=(8, 8))
    tape = ad.Tape()
    leaf = tape.leaf(p, "p")
    out = loss_depth_tv_nodes(leaf)
    assert float(out.value) == pytest.approx(loss_depth_tv(p), rel=1e-12)
    g = ad.backward(tape, out)["p"]
    want = fd_leaf_grad(loss_depth_tv, p)
    assert np.abs(g - want).max() < 1e-6
