import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from threshmag.config_io import load_scenario
from threshmag.sensing import (
    NoiseModel,
    OdmrConfig,
    OdmrSpectrum,
    SensingError,
    chain_sensitivity,
    classify,
    current_shot_noise,
    evaluate_chain,
    feasibility_map,
    fwhm,
    lorentzian_max_slope,
    max_slope,
    sensitivity,
    spontaneous_emission_study,
    threshold_contrast_to_spectrum,
)

from oracles import Q, lorentzian, lorentzian_slope_closed_form

D3 = load_scenario("D3").chain
POINT = evaluate_chain(D3)


def _lorentz_spectrum(amp=1.0, fl=1e6, f0=2.87e9, n=20001):
    f = np.linspace(f0 - 5 * fl, f0 + 5 * fl, n)
    return OdmrSpectrum(f, lorentzian(f, f0, amp, fl))


# -- Lorentzian slope ------------------------------------------------------------


def test_unit_lorentzian_slope():
    assert lorentzian_max_slope(1.0, 1.0) == pytest.approx(1.299e0, rel=1e-3)
    assert lorentzian_max_slope(1.0, 1.0) == pytest.approx(lorentzian_slope_closed_form(1.0, 1.0), rel=1e-14)


@given(st.floats(1e-9, 1.0), st.floats(1e5, 1e8))
def test_lorentzian_slope_linear(amp, fl):
    assert lorentzian_max_slope(amp, fl) == pytest.approx(amp * lorentzian_max_slope(1.0, 1.0) / fl, rel=1e-12)


def test_sampled_slope_and_location():
    amp, fl, f0 = 1e-3, 1e6, 2.87e9
    spec = _lorentz_spectrum(amp, fl, f0)
    s, f_star = max_slope(spec)
    assert s == pytest.approx(lorentzian_max_slope(amp, fl), rel=5e-3)
    df = spec.frequencies[1] - spec.frequencies[0]
    assert abs(abs(f_star - f0) - fl / (2 * math.sqrt(3))) <= df


def test_fwhm_of_pure_lorentzian():
    # the grid edge (u = 10) sits at 1/101 and is taken as background
    b = 1 / 101
    assert fwhm(_lorentz_spectrum(1.0, 2e6)) == pytest.approx(2e6 * math.sqrt(2 / (1 + b) - 1), rel=1e-6)


# -- spectra ----------------------------------------------------------------------


def test_spectrum_symmetric_about_center():
    spec = threshold_contrast_to_spectrum(D3, point=POINT)
    assert np.allclose(spec.powers, spec.powers[::-1], rtol=1e-9, atol=1e-18)
    assert int(np.argmax(spec.powers)) == spec.powers.size // 2


def test_far_tail_is_dark_at_off_threshold_drive():
    fl = 1 / (math.pi * D3.nv.t2_star)
    grid = 2.83e9 + fl * np.concatenate([[-1e9], np.linspace(-4, 4, 33), [1e9]])
    spec = threshold_contrast_to_spectrum(D3, OdmrConfig(frequency_grid=grid), POINT)
    assert spec.powers[0] == 0.0 and spec.powers[-1] == 0.0
    # at 4 linewidths the weight is 1/65, still just above threshold
    assert 0 < spec.powers[1] < 0.02 * spec.powers.max()


def test_spectrum_width_near_linewidth():
    spec = threshold_contrast_to_spectrum(D3, point=POINT)
    fl = spec.metadata["linewidth"]
    assert fl == pytest.approx(1 / (math.pi * D3.nv.t2_star))
    assert fwhm(spec) == pytest.approx(fl, rel=0.02)


def test_spectrum_metadata():
    spec = threshold_contrast_to_spectrum(D3, point=POINT)
    assert spec.metadata["delta_I_th"] == POINT.delta_I_th
    assert spec.metadata["drive_current"] == POINT.I_th_off
    assert spec.metadata["params_hash"] == D3.fingerprint()


def test_drive_above_threshold_lifts_background():
    spec = threshold_contrast_to_spectrum(D3, OdmrConfig(drive_current=1.01 * POINT.I_th_off), POINT)
    assert spec.powers[0] > 0


@pytest.mark.parametrize(
    "cfg",
    [
        OdmrConfig(frequency_grid=np.array([3.0, 2.0, 1.0])),
        OdmrConfig(frequency_grid=np.linspace(2.83e9, 2.83e9 + 1e3, 100)),
        OdmrConfig(linewidth=-1.0),
    ],
)
def test_bad_grids_rejected(cfg):
    with pytest.raises(SensingError):
        threshold_contrast_to_spectrum(D3, cfg, POINT)


def test_flat_and_short_spectra_rejected():
    f = np.linspace(0, 1, 64)
    with pytest.raises(SensingError, match="flat"):
        max_slope(OdmrSpectrum(f, np.zeros_like(f)))
    with pytest.raises(SensingError, match="16"):
        max_slope(OdmrSpectrum(f[:15], f[:15]))


# -- sensitivity --------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["optical_shot", "current_shot", "relative_current"])
def test_continuous_matches_sampled(kind):
    spec = threshold_contrast_to_spectrum(D3, OdmrConfig(n_points=4097), POINT)
    a = chain_sensitivity(D3, NoiseModel(kind), point=POINT).sensitivity
    b = sensitivity(spec, NoiseModel(kind), D3, POINT).sensitivity
    assert a == pytest.approx(b, rel=0.01)


def test_sensitivity_inverse_in_slope():
    spec = threshold_contrast_to_spectrum(D3, point=POINT)
    scaled = OdmrSpectrum(spec.frequencies, 2 * spec.powers, spec.metadata)
    n = NoiseModel("current_shot")
    assert sensitivity(scaled, n, D3, POINT).sensitivity == pytest.approx(0.5 * sensitivity(spec, n, D3, POINT).sensitivity, rel=1e-12)


def test_current_shot_sensitivity_inverse_in_contrast():
    n = NoiseModel("current_shot")
    base = chain_sensitivity(D3, n).sensitivity
    for k in (0.5, 2.0, 4.0):
        assert chain_sensitivity(D3.with_(contrast_scale=k), n).sensitivity == pytest.approx(base / k, rel=0.05)


def test_bandwidth_scaling():
    a = chain_sensitivity(D3, NoiseModel("optical_shot", bandwidth=1.0), point=POINT).sensitivity
    b = chain_sensitivity(D3, NoiseModel("optical_shot", bandwidth=4.0), point=POINT).sensitivity
    assert b == pytest.approx(2 * a, rel=1e-9)


def test_current_shot_noise_formula():
    assert current_shot_noise(0.05) == pytest.approx(math.sqrt(2 * Q * 0.05), rel=1e-15)


@pytest.mark.parametrize("kw", [dict(kind="thermal"), dict(bandwidth=0.0), dict(relative_level=-1e-6)])
def test_noise_model_validation(kw):
    with pytest.raises(SensingError):
        NoiseModel(**kw)


def test_report_flags():
    r = chain_sensitivity(D3, NoiseModel("optical_shot"), point=POINT)
    assert r.threshold_ok
    assert r.I_th_off == POINT.I_th_off
    assert r.shot_ok == (POINT.delta_I_th >= current_shot_noise(POINT.I_th_off))


# -- regions ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "ith, dith, ish, label",
    [(0.4, 1.0, 0.0, "C"), (0.3, 0.0, 1e-9, "A"), (0.05, 1e-6, 1e-9, "B"), (0.05, 1e-10, 1e-9, "A")],
)
def test_classify(ith, dith, ish, label):
    assert classify(ith, dith, ish) == label


def test_feasibility_map_consistent_with_classify():
    a = np.logspace(-22, -19, 5)
    g = np.linspace(0.01, 0.1, 4)
    fmap = feasibility_map(D3, a, g, point=POINT)
    assert fmap.labels.shape == (5, 4)
    for i in range(5):
        for j in range(4):
            assert fmap.labels[i, j] == classify(fmap.I_th[i, j], fmap.delta_I_th[i, j], fmap.shot_noise[i, j])
    # low gain pushes the threshold over the ceiling
    assert fmap.labels[0, 0] == "C" and fmap.labels[-1, -1] != "C"


def test_region_monotone_in_contrast():
    a = np.logspace(-22, -19, 6)
    g = np.linspace(0.01, 0.1, 5)
    rank = {"A": 0, "B": 1, "C": 2}
    prev = None
    for k in (1e-3, 1e-1, 1.0, 10.0):
        labels = feasibility_map(D3.with_(contrast_scale=k), a, g).labels
        if prev is not None:
            # more contrast never turns a B cell back into A; C is contrast independent
            assert not np.any((prev == "B") & (labels == "A"))
            assert np.array_equal(prev == "C", labels == "C")
        prev = labels
    assert rank["B"] > rank["A"]


@pytest.mark.parametrize("a, g", [([], [0.1]), ([1e-20], [-0.1]), ([[1e-20]], [0.1])])
def test_feasibility_map_bad_grid(a, g):
    with pytest.raises(SensingError):
        feasibility_map(D3, a, g, point=POINT)


# -- spontaneous emission --------------------------------------------------------------


@pytest.fixture(scope="module")
def beta_study():
    return spontaneous_emission_study(D3, [0.0, 1e-4, 1e-3, 1e-2], OdmrConfig(n_points=257), currents=np.linspace(0.5, 1.5, 41) * POINT.I_th_off)


def test_beta_zero_numeric_matches_analytic(beta_study):
    spec = threshold_contrast_to_spectrum(D3, OdmrConfig(n_points=257), POINT)
    analytic = sensitivity(spec, NoiseModel("optical_shot"), D3, POINT).sensitivity
    assert beta_study[0].report.sensitivity == pytest.approx(analytic, rel=0.01)
    assert np.allclose(beta_study[0].spectrum.powers, spec.powers, rtol=1e-6, atol=1e-15)


def test_sensitivity_never_improves_with_beta(beta_study):
    db = [r.report.sensitivity for r in beta_study]
    assert all(b >= a for a, b in zip(db, db[1:]))


def test_beta_out_of_range():
    with pytest.raises(SensingError):
        spontaneous_emission_study(D3, [1.5])
