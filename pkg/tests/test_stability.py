import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pulsesync.stability import (Estimator, PhaseSeries, StabilityCurve, detrend_linear,
                                 fit_slope, identify_noise, mdev, oadev, read_offset_csv,
                                 stability_report, tau_grid, tdev, tdev_from_mdev,
                                 write_curves_csv)


def mvar_textbook(x, m, tau0):
    """Triple-sum definition of the modified Allan variance."""
    n = x.size
    tau = m * tau0
    total = 0.0
    for j in range(n - 3 * m + 1):
        inner = sum(x[i + 2 * m] - 2 * x[i + m] + x[i] for i in range(j, j + m))
        total += inner * inner
    return total / (2 * m * m * tau * tau * (n - 3 * m + 1))


def oavar_textbook(x, m, tau0):
    n = x.size
    tau = m * tau0
    d = [x[i + 2 * m] - 2 * x[i + m] + x[i] for i in range(n - 2 * m)]
    return sum(v * v for v in d) / (2 * tau * tau * (n - 2 * m))


def power_law_phase(rng, n, alpha, tau0=1.0):
    """Phase series whose fractional frequency has PSD ~ f**alpha (FFT shaping)."""
    f = np.fft.rfftfreq(n, tau0)
    spec = rng.normal(size=f.size) + 1j * rng.normal(size=f.size)
    scale = np.zeros_like(f)
    scale[1:] = f[1:] ** (alpha / 2)
    y = np.fft.irfft(spec * scale, n)
    return np.cumsum(y) * tau0


@pytest.mark.parametrize("m", [1, 2, 5])
def test_mdev_and_oadev_match_textbook_sums(rng, m):
    x = rng.normal(size=60)
    s = PhaseSeries(0.5, x)
    assert mdev(s, [m * 0.5]).values[0] ** 2 == pytest.approx(mvar_textbook(x, m, 0.5),
                                                              rel=1e-12)
    assert oadev(s, [m * 0.5]).values[0] ** 2 == pytest.approx(oavar_textbook(x, m, 0.5),
                                                               rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(10, 400), tau0=st.floats(1e-3, 10.0))
def test_tdev_identity(seed, n, tau0):
    x = np.random.default_rng(seed).normal(size=n) * 1e-9
    s = PhaseSeries(tau0, x)
    md, td = mdev(s), tdev(s)
    assert np.array_equal(md.taus, td.taus)
    ok = md.values > 0
    assert np.all(np.abs(td.values[ok] / (md.taus[ok] / math.sqrt(3) * md.values[ok]) - 1)
                  <= 1e-12)


@pytest.mark.parametrize("tau, md, ps", [(1.0, 34e-12, 19.63), (2.0, 11e-12, 12.70),
                                         (5.0, 0.0, 0.0)])
def test_tdev_from_mdev_values(tau, md, ps):
    assert float(tdev_from_mdev(tau, md)) * 1e12 == pytest.approx(ps, abs=0.01)


def test_zero_series_is_degenerate():
    s = PhaseSeries(1.0, np.zeros(100))
    for est in (mdev, tdev, oadev):
        c = est(s)
        assert c.degenerate and not c.values.any()


def test_linear_phase_ramp_is_annihilated():
    s = PhaseSeries(1.0, 3e-9 * np.arange(200.0))
    assert np.allclose(mdev(s).values, 0.0, atol=1e-20)
    assert np.allclose(oadev(s).values, 0.0, atol=1e-20)


def test_white_pm_slope(rng):
    s = PhaseSeries(1.0, rng.normal(size=20_000) * 1e-10)
    c = mdev(s)
    assert fit_slope(c).exponent == pytest.approx(-1.5, abs=0.1)
    assert identify_noise(c).label == "white PM"


def test_flicker_fm_slope(rng):
    x = power_law_phase(rng, 2**17, -1.0)
    c = mdev(PhaseSeries(1.0, x), [2.0 ** k for k in range(2, 13)])
    assert fit_slope(c).exponent == pytest.approx(0.0, abs=0.15)
    assert identify_noise(c).label == "flicker FM"


def test_white_fm_matches_closed_form(rng):
    a, tau0 = 1e-11, 1e-3
    y = rng.normal(0.0, a / math.sqrt(tau0), 10**6)
    x = np.concatenate([[0.0], np.cumsum(y) * tau0])
    taus = [0.01, 0.1, 1.0, 10.0]
    c = oadev(PhaseSeries(tau0, x), taus)
    assert np.allclose(c.values, a / np.sqrt(taus), rtol=0.1)


def test_tdev_noise_class_uses_mdev_convention(rng):
    c = tdev(PhaseSeries(1.0, rng.normal(size=20_000)))
    assert identify_noise(c).label == "white PM"


def test_short_curve_cannot_be_classified():
    c = StabilityCurve([1.0, 2.0], [1e-11, 5e-12], Estimator.MDEV)
    with pytest.raises(ValueError):
        identify_noise(c)


def test_invalid_taus_are_skipped_with_warnings():
    s = PhaseSeries(0.15, np.zeros(100))
    c = mdev(s, [0.15, 0.2, 30.0])
    assert c.taus.tolist() == [0.15]
    assert len(c.warnings) == 2
    assert any("multiple" in w for w in c.warnings)
    assert any("needs" in w for w in c.warnings)


def test_tau_grid():
    g = tau_grid(1000, 1.0)
    assert g[0] == 1 and g[-1] <= 333
    assert np.all(np.diff(g) > 0)
    assert tau_grid(2, 1.0).size == 0


def test_detrend_pure_ramp():
    s = PhaseSeries.from_ps(0.15, 15.8e3 * 0.15 * np.arange(400))
    d = detrend_linear(s)
    assert d.slope_ns_per_s == pytest.approx(15.8, rel=1e-9)
    assert np.allclose(d.series.values, 0.0, atol=1e-18)


def test_detrend_zero_series():
    d = detrend_linear(PhaseSeries(1.0, np.zeros(10)))
    assert d.slope_ns_per_s == 0.0


def test_detrend_noisy_ramp_within_three_sigma(rng):
    t = 0.15 * np.arange(2000)
    s = PhaseSeries.from_ps(0.15, 15.8e3 * t + rng.normal(0, 40, t.size))
    d = detrend_linear(s)
    assert abs(d.slope_ns_per_s - 15.8) <= 3 * d.slope_stderr_ns_per_s


def test_offset_csv_round_trip(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("# comment\ntime_s,offset_ps\n0.0,1.5\n0.15,2.5\n0.3,-1\n")
    s = read_offset_csv(p)
    assert s.sample_interval == pytest.approx(0.15)
    assert s.values.tolist() == pytest.approx([1.5e-12, 2.5e-12, -1e-12])
    bad = tmp_path / "bad.csv"
    bad.write_text("time_s,offset_ps\n0,1\n1,1\n3,1\n")
    with pytest.raises(ValueError, match="uniform"):
        read_offset_csv(bad)
    with pytest.raises(ValueError, match="columns"):
        read_offset_csv(p, column="nope")


def test_curves_csv_and_report(tmp_path, rng):
    s = PhaseSeries(1.0, rng.normal(size=500))
    rep = stability_report(s)
    assert set(rep["curves"]) == {"MDEV", "TDEV", "OADEV"}
    write_curves_csv(tmp_path / "c.csv", rep["curves"].values())
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "tau_s,value,estimator"
    assert len(lines) == 1 + sum(len(c.taus) for c in rep["curves"].values())


def test_value_at_requires_an_exact_tau(rng):
    c = mdev(PhaseSeries(1.0, rng.normal(size=100)))
    assert c.value_at(1.0) == c.values[0]
    with pytest.raises(KeyError):
        c.value_at(1.5)
