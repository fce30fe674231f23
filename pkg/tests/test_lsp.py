import numpy as np
import pytest

from raycal.lsp import LspSet, compute_lsps, diffuse_percentage, error_stats


def dbm(mw):
    return 10 * np.log10(mw)


def test_single_component():
    p = 10 ** (-71.89 / 10)
    out = compute_lsps([p], [8e-9], [37.0])
    assert out.total_specular_power_dbm == pytest.approx(-71.89)
    assert out.mean_delay_ns == pytest.approx(8.0)
    assert out.delay_spread_ns == pytest.approx(0.0, abs=1e-9)
    assert out.mean_azimuth_deg == pytest.approx(37.0)
    assert out.azimuth_spread_deg == pytest.approx(0.0, abs=1e-6)
    assert out.diffuse_percent == pytest.approx(0.0)


def test_two_equal_components_delay_moments():
    out = compute_lsps([1.0, 1.0], [10e-9, 20e-9], [0.0, 0.0])
    assert out.mean_delay_ns == pytest.approx(15.0)
    assert out.delay_spread_ns == pytest.approx(5.0)


def test_azimuth_wraparound_circular_spread():
    out = compute_lsps([1.0, 1.0], [10e-9, 10e-9], [350.0, 10.0])
    assert out.mean_azimuth_deg == pytest.approx(0.0, abs=1e-9)
    expected = np.degrees(np.sqrt(-2 * np.log(np.cos(np.deg2rad(10)))))
    assert out.azimuth_spread_deg == pytest.approx(expected, rel=1e-9)
    assert out.azimuth_spread_deg == pytest.approx(10.03, abs=0.01)


def test_linear_spread_switch():
    out = compute_lsps([1.0, 1.0], [10e-9, 10e-9], [350.0, 10.0], circular_spread=False)
    assert out.azimuth_spread_deg == pytest.approx(10.0, abs=1e-9)


def test_empty_components():
    out = compute_lsps([], [], [])
    assert out.empty
    assert np.isnan(out.mean_delay_ns)


def test_diffuse_percentage_values():
    assert diffuse_percentage(1.0, 1.0) == pytest.approx(0.0)
    assert diffuse_percentage(1.0, 0.6529) == pytest.approx(34.71)
    # specular marginally above the total clips to zero
    assert diffuse_percentage(1.0, 1.0 + 1e-12) == pytest.approx(0.0)
    assert np.isnan(diffuse_percentage(0.0, 0.0))


def test_lsp_invariances():
    rng = np.random.default_rng(8)
    p = rng.random(12)
    tau = rng.uniform(5e-9, 100e-9, 12)
    az = rng.uniform(0, 360, 12)
    base = compute_lsps(p, tau, az)
    shifted = compute_lsps(p, tau + 13e-9, az)
    assert shifted.mean_delay_ns == pytest.approx(base.mean_delay_ns + 13.0, abs=1e-9)
    assert shifted.delay_spread_ns == pytest.approx(base.delay_spread_ns, abs=1e-9)
    rotated = compute_lsps(p, tau, (az + 77.0) % 360)
    assert (rotated.mean_azimuth_deg - base.mean_azimuth_deg) % 360 == pytest.approx(77.0, abs=1e-6)
    assert rotated.azimuth_spread_deg == pytest.approx(base.azimuth_spread_deg, abs=1e-9)
    scaled = compute_lsps(3.7 * p, tau, az)
    assert scaled.mean_delay_ns == pytest.approx(base.mean_delay_ns, abs=1e-9)
    assert scaled.delay_spread_ns == pytest.approx(base.delay_spread_ns, abs=1e-9)
    assert scaled.azimuth_spread_deg == pytest.approx(base.azimuth_spread_deg, abs=1e-9)
    assert scaled.total_specular_power_dbm == pytest.approx(
        base.total_specular_power_dbm + 10 * np.log10(3.7), abs=1e-9)


def test_error_stats_two_point_example():
    # errors {2.54, -0.74}: mean 0.90, population std 1.64, rmse 1.87
    st = error_stats([0.0, 0.0], [2.54, -0.74])
    assert st.mean_error == pytest.approx(0.90)
    assert st.std_dev == pytest.approx(1.64)
    assert st.rmse == pytest.approx(1.87, abs=0.005)
    assert st.rmse ** 2 == pytest.approx(st.mean_error ** 2 + st.std_dev ** 2, abs=1e-9)


def test_error_stats_identity_random():
    rng = np.random.default_rng(4)
    for _ in range(100):
        m = rng.normal(size=7)
        p = rng.normal(size=7)
        st = error_stats(m, p)
        assert st.rmse ** 2 == pytest.approx(st.mean_error ** 2 + st.std_dev ** 2, abs=1e-12)


def test_error_stats_perfect_prediction():
    st = error_stats([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert st.mean_error == 0.0
    assert st.std_dev == 0.0
    assert st.rmse == 0.0
    assert st.correlation == pytest.approx(1.0)


def test_error_stats_constant_series_flag():
    st = error_stats([1.0, 1.0, 1.0], [2.0, 2.5, 3.0])
    assert st.constant_series
    assert np.isnan(st.correlation)


def test_error_stats_anticorrelation():
    st = error_stats([1.0, 2.0, 3.0], [3.0, 2.0, 1.0])
    assert st.correlation == pytest.approx(-1.0)


def test_error_stats_sign_convention():
    # predicted - measured: -70.99 - (-71.89) = +0.90
    st = error_stats([-71.89, -71.89], [-70.99, -70.99])
    assert st.mean_error == pytest.approx(0.90)


def test_error_stats_circular_wrap():
    st = error_stats([350.0, 10.0], [10.0, 350.0], circular=True)
    assert st.mean_error == pytest.approx(0.0)
    assert st.std_dev == pytest.approx(20.0)


def test_error_stats_length_mismatch():
    with pytest.raises(ValueError):
        error_stats([1.0], [1.0, 2.0])
