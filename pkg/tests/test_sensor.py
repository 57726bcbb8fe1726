"""Measurement model: count rates, Poisson sampling, photon-level scaling,
background, and thinning, with Monte-Carlo moment and distribution checks."""

import numpy as np
import pytest
from scipy import stats

from translidar import (
    DomainError, SensorModel, TransientImage, add_background,
    background_per_bin, expected_counts, sample_poisson,
    scale_to_photon_level, snr, thin_histogram,
)


def cube(data, bw=0.1, t0=0.0):
    return TransientImage(np.asarray(data, dtype=np.float64), bw, t0)


# ---------------------------------------------------------------------------
# sensor model and expected counts

def test_sensor_model_validation():
    with pytest.raises(DomainError):
        SensorModel(0, 0.5)
    with pytest.raises(DomainError):
        SensorModel(10, 0.0)
    with pytest.raises(DomainError):
        SensorModel(10, 1.5)
    with pytest.raises(DomainError):
        SensorModel(10, 0.5, ambient_rate=-1.0)
    m = SensorModel(10, 0.5, ambient_rate=0.2, dark_count=0.1)
    assert m.background == pytest.approx(10 * (0.5 * 0.2 + 0.1))


def test_expected_counts_zero():
    m = SensorModel(5, 0.9)
    out = expected_counts(cube(np.zeros((2, 2, 4))), m)
    assert np.array_equal(out, np.zeros((2, 2, 4)))


def test_expected_counts_arithmetic():
    # N=10, eta=0.5, flux=2 per bin, B=1 -> 10*0.5*2 + 1 = 11
    m = SensorModel(10, 0.5, ambient_rate=0.08, dark_count=0.06)
    assert m.background == pytest.approx(1.0)
    out = expected_counts(cube(2.0 * np.ones((2, 2, 3))), m)
    assert np.allclose(out, 11.0)


def test_expected_counts_matches_scalar_loop():
    rng = np.random.default_rng(0)
    data = rng.uniform(size=(3, 4, 5))
    amb = rng.uniform(size=(3, 4))
    m = SensorModel(7, 0.6, ambient_rate=amb, dark_count=0.02)
    out = expected_counts(cube(data), m)
    for i in range(3):
        for j in range(4):
            for n in range(5):
                want = 7 * 0.6 * data[i, j, n] + 7 * (0.6 * amb[i, j] + 0.02)
                assert out[i, j, n] == want


def test_expected_counts_affine():
    rng = np.random.default_rng(1)
    data = rng.uniform(size=(2, 2, 6))
    m1 = SensorModel(4, 0.5, dark_count=0.1)
    m2 = SensorModel(8, 0.5, dark_count=0.1)
    a = expected_counts(cube(data), m1)
    b = expected_counts(cube(2.0 * data), m1)
    assert np.allclose(b - a, 4 * 0.5 * data)          # affine in flux
    assert np.allclose(expected_counts(cube(data), m2), 2.0 * a)  # linear in N


def test_expected_counts_shape_mismatch():
    m = SensorModel(4, 0.5, ambient_rate=np.ones((3, 3)))
    with pytest.raises(DomainError):
        expected_counts(cube(np.zeros((2, 2, 4))), m)


# ---------------------------------------------------------------------------
# SNR

def test_snr_cases():
    assert snr(100.0) == pytest.approx(10.0)
    assert snr(0.0) == 0.0
    with pytest.raises(DomainError):
        snr(-1.0)


def test_snr_doubles_with_quadrupled_pulses():
    lam, amb, dark = 0.7, 0.05, 0.01
    vals = []
    for n in (100, 400):
        m = SensorModel(n, 0.5, ambient_rate=amb, dark_count=dark)
        rate = expected_counts(cube(np.full((1, 1, 1), lam)), m)[0, 0, 0]
        vals.append(float(snr(rate)))
    assert vals[1] / vals[0] == pytest.approx(2.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Poisson sampling

def test_poisson_zero_rate():
    rng = np.random.default_rng(0)
    assert np.array_equal(sample_poisson(np.zeros(1000), rng), np.zeros(1000))


@pytest.mark.parametrize("rate", [0.1, 1.0, 5.0, 50.0])
def test_poisson_moments(rate):
    rng = np.random.default_rng(42)
    n = 10 ** 5
    x = sample_poisson(np.full(n, rate), rng)
    assert abs(x.mean() - rate) < 3.0 * np.sqrt(rate / n)
    assert abs(x.var() - rate) < 0.05 * rate


def test_poisson_deterministic():
    r = np.random.default_rng(3).uniform(0, 20, size=500)
    a = sample_poisson(r, np.random.default_rng(7))
    b = sample_poisson(r, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_poisson_rejects_bad_rates():
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        sample_poisson(np.array([1.0, -0.5]), rng)
    with pytest.raises(DomainError):
        sample_poisson(np.array([np.inf]), rng)


# ---------------------------------------------------------------------------
# photon-level scaling

def test_scale_fixed_point():
    data = np.ones((4, 4, 10))
    mask = np.ones((4, 4), dtype=bool)
    k, scaled = scale_to_photon_level([cube(data)], [mask], 10.0)
    assert k == pytest.approx(1.0)
    assert np.allclose(scaled[0].data, data)


def test_scale_linearity_and_ratio():
    rng = np.random.default_rng(5)
    data = rng.uniform(size=(6, 6, 8))
    mask = rng.random((6, 6)) < 0.5
    k1, _ = scale_to_photon_level([cube(data)], [mask], 50.0)
    k2, _ = scale_to_photon_level([cube(data)], [mask], 100.0)
    assert k2 / k1 == pytest.approx(2.0)
    want = 50.0 * mask.sum() / data[mask].sum()
    assert k1 == pytest.approx(want, rel=1e-12)


def test_scale_achieves_target_within_tolerance():
    rng = np.random.default_rng(6)
    cubes = [cube(rng.uniform(size=(5, 5, 12))) for _ in range(3)]
    masks = [rng.random((5, 5)) < 0.6 for _ in range(3)]
    k, scaled = scale_to_photon_level(cubes, masks, 150.0)
    tot = sum(c.data[m].sum() for c, m in zip(scaled, masks))
    pix = sum(int(m.sum()) for m in masks)
    assert tot / pix == pytest.approx(150.0, abs=1e-6)
    assert scaled[0].exposure_scale == pytest.approx(k)


def test_scale_rejects_empty():
    with pytest.raises(DomainError):
        scale_to_photon_level([cube(np.ones((2, 2, 2)))],
                              [np.zeros((2, 2), dtype=bool)], 10.0)
    with pytest.raises(DomainError):
        scale_to_photon_level([cube(np.zeros((2, 2, 2)))],
                              [np.ones((2, 2), dtype=bool)], 10.0)


# ---------------------------------------------------------------------------
# background injection

def test_background_reference_level():
    # total 2850 scene photons -> 0.001 background photons per pixel
    assert background_per_bin(2850.0, 10) * 10 == pytest.approx(0.001)
    assert background_per_bin(0.0, 10) == 0.0
    assert background_per_bin(2850.0, 100) == pytest.approx(1e-5)


def test_add_background_uniform():
    c = cube(np.zeros((2, 2, 100)))
    out = add_background(c, 2850.0)
    assert np.allclose(out.data, 1e-5)
    assert out.data.shape == (2, 2, 100)


# ---------------------------------------------------------------------------
# thinning

def test_thin_identity():
    rng = np.random.default_rng(0)
    counts = rng.poisson(20.0, size=(4, 4, 6))
    mask = np.ones((4, 4), dtype=bool)
    current = counts[mask].sum() / mask.sum()
    out = thin_histogram(counts, current, mask, rng)
    assert np.array_equal(out, counts)
    out[0, 0, 0] += 1            # identity result is a copy, not a view
    assert out[0, 0, 0] != counts[0, 0, 0]


def test_thin_rejects_upscaling():
    counts = np.full((2, 2, 4), 5)
    mask = np.ones((2, 2), dtype=bool)
    with pytest.raises(DomainError):
        thin_histogram(counts, 100.0, mask, np.random.default_rng(0))


def test_thin_moments():
    # p = 0.5 on all-100 bins: per-bin result is Binomial(100, 0.5)
    counts = np.full((100, 100, 1), 100)
    mask = np.ones((100, 100), dtype=bool)
    out = thin_histogram(counts, 50.0, mask, np.random.default_rng(8))
    n = out.size
    assert abs(out.mean() - 50.0) < 3.0 * np.sqrt(25.0 / n)
    assert abs(out.var() - 25.0) < 0.05 * 25.0


def test_thin_composition():
    # thinning twice (p1 then p2) matches thinning once with p1*p2
    rng = np.random.default_rng(9)
    base = rng.poisson(10.0, size=(200, 500, 1))
    mask = np.ones((200, 500), dtype=bool)
    m0 = base[mask.nonzero()].mean()
    once = thin_histogram(base, 0.3 * m0, mask, np.random.default_rng(1))
    two_a = thin_histogram(base, 0.6 * m0, mask, np.random.default_rng(2))
    twice = thin_histogram(two_a, 0.5 * (0.6 * m0), mask,
                           np.random.default_rng(3))
    n = base.size
    se = np.sqrt(2 * 3.0 / n)      # both arms ~Poisson(3) per entry
    assert abs(once.mean() - twice.mean()) < 3.0 * se
    assert abs(once.var() - twice.var()) < 0.05 * 3.0


def test_thinned_poisson_is_poisson():
    # X ~ Poisson(8) thinned with p = 0.4 must be Poisson(3.2)
    n = 10 ** 5
    draws = sample_poisson(np.full((n, 1, 1), 8.0), np.random.default_rng(10))
    mask = np.ones((n, 1), dtype=bool)
    thinned = thin_histogram(draws, 3.2, mask, np.random.default_rng(11)).ravel()
    lam = 3.2
    kmax = int(thinned.max())
    obs = np.bincount(thinned, minlength=kmax + 1).astype(np.float64)
    exp = stats.poisson.pmf(np.arange(kmax + 1), lam) * n
    exp[-1] = n - exp[:-1].sum()            # fold the tail into the last cell
    while exp[-1] < 5.0:                    # pool sparse tail cells
        exp[-2] += exp[-1]
        obs[-2] += obs[-1]
        exp, obs = exp[:-1], obs[:-1]
    chi2 = ((obs - exp) ** 2 / exp).sum()
    p = stats.chi2.sf(chi2, len(obs) - 1)
    assert p > 0.01
