import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvwrite.kmc import DefectWorld
from nvwrite.lattice import AXIS_CLASSES, LatticeSite, Orientation, WorldConfig, neighbors
from nvwrite.photophysics import (
    EmitterModel,
    HbtHistogram,
    MonitorTrace,
    PLImage,
    ThreeLevelParams,
    coincidence_histogram,
    emitter_stream,
    fluorescence_rate,
    malus_intensity,
    malus_phase_deg,
    nv_rates,
    polarization_scan,
    render_pl_image,
    sample_bin,
    simulate_hbt,
)
from nvwrite.laser import NonlinearityParams

import oracles as O

MODEL = EmitterModel()
ORIENTS = [Orientation(c) for c in AXIS_CLASSES]


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------- brightness
def test_rate_windows_follow_orientation():
    for o in ORIENTS:
        lo, hi = MODEL.window(o)
        assert MODEL.rate_for(o, 0.0) == lo and MODEL.rate_for(o, 1.0) == hi
        if o.in_plane:
            assert (lo, hi) == (8000.0, 11000.0)
        else:
            assert (lo, hi) == (11000.0, 15000.0)


def test_emitter_model_validation():
    with pytest.raises(ValueError):
        EmitterModel(in_plane_window=(9000, 8000))
    with pytest.raises(ValueError):
        EmitterModel(in_plane_window=(8000, 12000), out_of_plane_window=(11000, 15000))
    with pytest.raises(ValueError):
        EmitterModel(background=-1)
    with pytest.raises(ValueError):
        EmitterModel(visibility_in=1.2)


def test_fluorescence_rate_sums_bound_nvs():
    w = DefectWorld(config=WorldConfig(bounds=(200, 200, 200), nitrogen_ppm=0.0),
                    nonlinearity=NonlinearityParams(e50_v=1e9, e50_i=1e9), rng=0)
    assert fluorescence_rate(w, MODEL) == MODEL.background
    for n in (LatticeSite(0, 0, 0, 0), LatticeSite(40, 0, 0, 0)):
        w.add_nitrogen(n)
        w.add_vacancy(neighbors(n)[0])
    w.pulses(1, 19.0, generate=False)
    recs = w.nv_records()
    assert len(recs) == 2
    want = MODEL.background + sum(MODEL.rate_for(r.orientation, r.rate_quantile) for r in recs)
    assert fluorescence_rate(w, MODEL) == pytest.approx(want)
    np.testing.assert_allclose(nv_rates(w, MODEL), [MODEL.rate_for(r.orientation, r.rate_quantile) for r in recs])


def test_sample_bin_is_poisson():
    r = rng(3)
    draws = np.array([sample_bin(12000.0, 0.02, r) for _ in range(4000)])
    assert abs(draws.mean() - 240.0) < 4 * math.sqrt(240.0 / 4000)
    assert draws.var() == pytest.approx(240.0, rel=0.1)
    assert sample_bin(0.0, 0.02, r) == 0
    with pytest.raises(ValueError):
        sample_bin(-1.0, 0.02, r)


# ---------------------------------------------------------------- polarization
@given(st.floats(0, 360), st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0, 180))
def test_malus_matches_oracle(theta, i0, di, phi):
    assert malus_intensity(theta, i0, di, phi) == pytest.approx(O.malus(theta, i0, di, phi), rel=1e-12, abs=1e-9)


def test_malus_phase_is_perpendicular_to_axis_projection():
    for o in ORIENTS:
        phi = malus_phase_deg(o)
        assert 0.0 <= phi < 180.0
        # intensity peaks where θ + φ ≡ 0, i.e. θ at right angles to the projection
        peak = (-phi) % 180.0
        diff = abs((peak - o.projection_angle_deg) % 180.0 - 90.0)
        assert diff == pytest.approx(0.0, abs=1e-9)


def test_scan_mean_and_visibility():
    angles = np.arange(0.0, 180.0, 1.0)
    for o in ORIENTS:
        scan = np.array(polarization_scan(o, MODEL, angles, rate=10000.0, dwell=1.0))
        vals = scan[:, 1]
        assert vals.mean() == pytest.approx(10000.0, rel=1e-12)
        vis = (vals.max() - vals.min()) / (vals.max() + vals.min())
        assert vis == pytest.approx(MODEL.visibility(o), abs=1e-3)


def test_scan_noise_and_errors():
    o = ORIENTS[0]
    a = polarization_scan(o, MODEL, [0, 10], shot_noise=True, rng=rng(1))
    b = polarization_scan(o, MODEL, [0, 10], shot_noise=True, rng=rng(1))
    assert a == b
    assert all(float(v).is_integer() for _, v in a)
    with pytest.raises(ValueError):
        polarization_scan(o, MODEL, [0, 10], shot_noise=True)
    with pytest.raises(ValueError):
        polarization_scan(o, MODEL, [])
    with pytest.raises(ValueError):
        polarization_scan(o, MODEL, [0], visibility=2.0)


# ---------------------------------------------------------------- photon statistics
@given(st.floats(1.0, 3.0), st.floats(1.0, 50.0), st.floats(20.0, 500.0))
def test_three_level_zero_delay_and_long_delay(c, t2, t3):
    p = ThreeLevelParams(c, t2, t3)
    assert p.g2(0.0) == pytest.approx(0.0, abs=1e-12)
    assert p.g2(1e6) == pytest.approx(1.0, rel=1e-12)
    for tau in (0.5, 7.0, 80.0):
        assert p.g2(tau) == pytest.approx(O.g2_three_level(tau, c, t2, t3), rel=1e-12, abs=1e-15)
        assert p.g2(-tau) == p.g2(tau)


def test_emitter_stream_rate_and_antibunching():
    # a bright single emitter: the self-coincidences follow the three-level g2
    params = ThreeLevelParams()
    rate, dur = 2.0e6, 0.4
    t = emitter_stream(rate, dur, params, rng(7))
    assert np.all(np.diff(t) > 0)
    assert abs(t.size - rate * dur) < 5 * math.sqrt(rate * dur)
    tau, counts = coincidence_histogram(t, t, 2.0, 400.0)
    keep = tau > 1.0
    norm = counts[keep] / (t.size**2 * 2.0e-9 / dur)
    want = params.g2(tau[keep])
    err = np.sqrt(counts[keep].clip(1)) / (t.size**2 * 2.0e-9 / dur)
    z = (norm - want) / err
    assert np.mean(np.abs(z) < 4) > 0.98
    assert norm[0] < 0.3  # first bin (2 ns) sits deep in the dip


def test_hbt_single_and_pair_without_background():
    one = simulate_hbt(1, 4.0e5, 0.0, 2.0, rng=rng(1), bin_width=2.0, max_tau=300.0)
    two = simulate_hbt(2, 4.0e5, 0.0, 2.0, rng=rng(2), bin_width=2.0, max_tau=300.0)
    z1 = one.normalized()[np.argmin(np.abs(one.tau))]
    z2 = two.normalized()[np.argmin(np.abs(two.tau))]
    assert z1 < 0.15
    assert 0.35 < z2 < 0.65
    far = np.abs(one.tau) > 250
    assert one.normalized()[far].mean() == pytest.approx(1.0, abs=0.05)


def test_hbt_background_only_is_flat():
    h = simulate_hbt(0, 0.0, 3.0e5, 2.0, rng=rng(4), bin_width=5.0, max_tau=200.0)
    g = h.normalized()
    assert g.mean() == pytest.approx(1.0, abs=0.03)


def test_hbt_csv_roundtrip(tmp_path):
    h = simulate_hbt(1, 2.0e4, 5.0e3, 1.0, rng=rng(9), bin_width=4.0, max_tau=100.0)
    p = tmp_path / "hbt.csv"
    h.to_csv(p)
    g = HbtHistogram.from_csv(p)
    np.testing.assert_array_equal(g.tau, h.tau)
    np.testing.assert_array_equal(g.coincidences, h.coincidences)
    assert (g.bin_width, g.duration, g.n_a, g.n_b) == (h.bin_width, h.duration, h.n_a, h.n_b)


def test_hbt_is_reproducible():
    a = simulate_hbt(1, 2.0e4, 5.0e3, 0.5, rng=rng(5))
    b = simulate_hbt(1, 2.0e4, 5.0e3, 0.5, rng=rng(5))
    np.testing.assert_array_equal(a.coincidences, b.coincidences)


def test_coincidence_histogram_against_brute_force():
    r = rng(11)
    a = np.sort(r.uniform(0, 5000, 300))
    b = np.sort(r.uniform(0, 5000, 300))
    tau, counts = coincidence_histogram(a, b, 10.0, 200.0)
    d = (b[None, :] - a[:, None]).ravel()
    edges = np.append(tau - 5.0, tau[-1] + 5.0)
    want, _ = np.histogram(d, bins=edges)
    np.testing.assert_array_equal(counts, want)


def test_simulate_hbt_validation():
    with pytest.raises(ValueError):
        simulate_hbt(-1, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        simulate_hbt(1, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        ThreeLevelParams(c=0.5)


# ---------------------------------------------------------------- traces and images
def test_monitor_trace_roundtrip(tmp_path):
    tr = MonitorTrace(0.02)
    for i in range(5):
        tr.append(0.02 * (i + 1), 10 * i, 20 * (i + 1), "Quiet:Quiet")
    p = tmp_path / "trace.csv"
    tr.to_csv(p)
    back = MonitorTrace.from_csv(p)
    assert back.states == tr.states
    np.testing.assert_array_equal(back.counts, tr.counts)
    np.testing.assert_allclose(back.rates(), tr.counts / 0.02)
    with pytest.raises(ValueError):
        tr.append(0.01, 1, 1, "x")
    with pytest.raises(ValueError):
        tr.append(1.0, -1, 1, "x")


def test_rendered_spot_has_requested_fwhm():
    img = render_pl_image([(0.0, 0.0, 100.0)], psf_fwhm=200.0, pixel=10.0, extent=(-400, 400, -400, 400), background=5.0)
    xs, ys = img.coords()
    r0 = int(np.argmin(np.abs(ys)))
    c0 = int(np.argmin(np.abs(xs)))
    assert img.data[r0, c0] == pytest.approx(105.0)
    c_half = int(np.argmin(np.abs(xs - 100.0)))
    assert img.data[r0, c_half] == pytest.approx(55.0, rel=1e-9)
    assert img.data[r0, c0 + 5] == img.data[r0, c0 - 5]


def test_image_save_load_and_noise(tmp_path):
    em = [(0.0, 0.0, 50.0), (300.0, 100.0, 20.0)]
    img = render_pl_image(em, background=2.0, noise=True, rng=rng(2))
    assert np.all(img.data == np.round(img.data))
    p = tmp_path / "img.txt"
    img.save(p)
    back = PLImage.load(p)
    np.testing.assert_array_equal(back.data, img.data)
    assert (back.pixel_nm, back.x0_nm, back.y0_nm) == (img.pixel_nm, img.x0_nm, img.y0_nm)
    with pytest.raises(ValueError):
        render_pl_image([])
    with pytest.raises(ValueError):
        render_pl_image(em, noise=True)
