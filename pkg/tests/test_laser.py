import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvwrite.laser import (
    BeamProfile,
    NonlinearityParams,
    PulsePlan,
    focal_volume_integral,
    generation_mean,
    hop_probability,
    pairs_per_pulse,
    psf_intensity,
)

import oracles as O

BEAM = BeamProfile()
NL = NonlinearityParams()
SITE_DENSITY = 8.0 / 0.357**3

# frozen from the quadrature oracle (tests/oracles.py)
FOCAL_INTEGRAL_N15 = 3831858.742035872  # nm^3
FOCAL_INTEGRAL_N10 = 7283176.913578309


def test_default_beam():
    assert BEAM.w0 == 297.0 and BEAM.zR == 852.0


def test_psf_identities():
    assert psf_intensity(BEAM, 0.0, 0.0) == BEAM.I0
    assert psf_intensity(BEAM, BEAM.w0, 0.0) == pytest.approx(math.exp(-2.0), rel=1e-12)
    assert psf_intensity(BEAM, 0.0, BEAM.zR) == pytest.approx(0.5, rel=1e-12)


@given(st.floats(0, 2000), st.floats(-5000, 5000))
def test_psf_matches_oracle(r, z):
    assert psf_intensity(BEAM, r, z) == pytest.approx(O.psf(r, z), rel=1e-12, abs=1e-300)


@given(st.floats(0, 1500), st.floats(0, 4000), st.floats(1e-3, 200), st.floats(1e-3, 200))
def test_psf_symmetric_and_decreasing(r, z, dr, dz):
    assert psf_intensity(BEAM, r, z) == psf_intensity(BEAM, r, -z)
    a = psf_intensity(BEAM, r, z)
    assert psf_intensity(BEAM, r + dr, z) <= a
    # along z the intensity only falls inside r <= w0/sqrt(2); further out the spreading beam brightens
    rr = min(r, BEAM.w0 / math.sqrt(2.0))
    assert psf_intensity(BEAM, rr, z + dz) <= psf_intensity(BEAM, rr, z)


def test_psf_strictly_decreasing_near_focus():
    r = np.linspace(0, 600, 50)
    assert np.all(np.diff(psf_intensity(BEAM, r, 0.0)) < 0)
    z = np.linspace(0, 2000, 50)
    assert np.all(np.diff(psf_intensity(BEAM, 0.0, z)) < 0)


def test_generation_mean_power_law():
    assert generation_mean(NL, BEAM, 0.0, 0.0, 0.0) == 0.0
    e = 12.0
    assert generation_mean(NL, BEAM, 2 * e, 0, 0) / generation_mean(NL, BEAM, e, 0, 0) == pytest.approx(2**15, rel=1e-12)
    ratio = generation_mean(NL, BEAM, 27.0, BEAM.w0, 0.0) / generation_mean(NL, BEAM, 27.0, 0.0, 0.0)
    assert ratio == pytest.approx(math.exp(-30.0), rel=1e-10)


def test_hop_probability_definition_and_clamp():
    assert hop_probability(NL, BEAM, "vacancy", 0.0, 0, 0) == 0.0
    assert hop_probability(NL, BEAM, "vacancy", NL.e50_v, 0, 0) == pytest.approx(1.0)
    assert hop_probability(NL, BEAM, "vacancy", 3 * NL.e50_v, 0, 0) == 1.0
    assert hop_probability(NL, BEAM, "nitrogen", 40.0, 0, 0) == 0.0
    with pytest.raises(ValueError):
        hop_probability(NL, BEAM, "carbon", 19.0, 0, 0)


def test_default_window_calibration():
    p19 = hop_probability(NL, BEAM, "vacancy", 19.0, 0, 0)
    p13 = hop_probability(NL, BEAM, "vacancy", 13.0, 0, 0)
    assert 0.0 < p19 < 1.0
    assert p13 / p19 == pytest.approx((13 / 19) ** 10, rel=1e-12)
    assert p13 / p19 == pytest.approx(0.022485239280132175, rel=1e-12)
    assert NL.e50_i < NL.e50_v  # interstitials mobilise first


@given(st.sampled_from(["vacancy", "interstitial"]), st.floats(0, 60), st.floats(0, 60), st.floats(0, 800), st.floats(-2000, 2000))
def test_monotone_in_energy(species, e1, e2, r, z):
    lo, hi = sorted((e1, e2))
    assert hop_probability(NL, BEAM, species, lo, r, z) <= hop_probability(NL, BEAM, species, hi, r, z)
    assert hop_probability(NL, BEAM, species, hi, r, z) <= 1.0
    assert generation_mean(NL, BEAM, lo, r, z) <= generation_mean(NL, BEAM, hi, r, z)


def test_focal_volume_integral_against_quadrature():
    assert focal_volume_integral(BEAM, 15) == pytest.approx(FOCAL_INTEGRAL_N15, rel=1e-12)
    assert focal_volume_integral(BEAM, 10) == pytest.approx(FOCAL_INTEGRAL_N10, rel=1e-12)


def test_default_pair_means():
    mu27 = pairs_per_pulse(NL, BEAM, 27.0, SITE_DENSITY)
    mu19 = pairs_per_pulse(NL, BEAM, 19.0, SITE_DENSITY)
    assert mu27 == pytest.approx(21.613038364274466, rel=1e-9)
    assert mu19 == pytest.approx(0.1110614594663806, rel=1e-9)
    assert mu27 / mu19 == pytest.approx((27 / 19) ** 15, rel=1e-12)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        BeamProfile(w0=0)
    with pytest.raises(ValueError):
        PulsePlan(rep_rate=0)
    with pytest.raises(ValueError):
        NonlinearityParams(n_gen=0.5)
    with pytest.raises(ValueError):
        generation_mean(NL, BEAM, -1.0, 0, 0)
