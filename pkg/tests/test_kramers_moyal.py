import dataclasses
import io
import math

import numpy as np
import pytest
from scipy.signal import lfilter

from distdyn import jsonio, kramers_moyal as km
from distdyn.detrend import DailyPattern
from distdyn.errors import DomainError, InsufficientDataError

DT = 600
DAY0 = 1609718400
K_TRUE = 2.02e-4
SIGMA_TRUE = 1.34e-4
S2_TRUE = SIGMA_TRUE * SIGMA_TRUE
LAGS = (600, 1200, 1800)


def ou_series(n, dt, k, sigma2, rng):
    """Exact OU discretization of dx = -k x dt + sigma dW."""
    a = np.exp(-k * dt)
    var = sigma2 / (2.0 * k)
    s = np.sqrt(var * (1.0 - a * a))
    eps = rng.normal(0.0, 1.0, n)
    eps[0] = rng.normal(0.0, np.sqrt(var)) / s  # x[0] stationary
    return lfilter([s], [1.0, -a], eps)


def uniform_times(n, dt=DT):
    return np.arange(n, dtype=np.int64) * dt


def trading_times(n_days):
    return np.array(
        [
            DAY0 + d * 86400 + (540 + s * 10) * 60
            for d in range(n_days)
            for s in range(39)
        ],
        dtype=np.int64,
    )


def constant_pattern(level, session_minutes=390):
    return DailyPattern(
        parameter_name="phi",
        degree=0,
        coeffs=(level,),
        residual_rms=0.0,
        session_minutes=session_minutes,
    )


class TestConditionalMoments:
    def test_bookkeeping_identity_on_trading_grid(self):
        t = trading_times(30)
        x = np.sin(np.arange(t.size, dtype=float))  # bounded: nothing out of range
        mom = km.conditional_moments(t, x, LAGS, min_count=5)
        for j, lag in enumerate(mom.lags):
            assert (
                mom.used[j] + mom.gap_excluded[j] + mom.out_of_range[j]
                == mom.total_pairs[j]
            )
            steps = lag // 600
            # candidates: everything early enough for an in-grid target
            assert mom.total_pairs[j] == 39 * 30 - steps
            # each of the 29 day boundaries eats `steps` anchors
            assert mom.gap_excluded[j] == 29 * steps
            assert mom.out_of_range[j] == 0
            assert mom.used[j] == (39 - steps) * 30
            assert mom.counts[:, j].sum() == mom.used[j]

    def test_bookkeeping_identity_with_outliers(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0.0, 1.5, 20000)
        mom = km.conditional_moments(uniform_times(20000), x, LAGS)
        assert all(
            mom.used[j] + mom.gap_excluded[j] + mom.out_of_range[j]
            == mom.total_pairs[j]
            for j in range(len(mom.lags))
        )
        # a gaussian series has anchors beyond mean +- 3 std
        assert all(o > 0 for o in mom.out_of_range)
        assert all(g == 0 for g in mom.gap_excluded)

    def test_constant_series_single_populated_bin(self):
        mom = km.conditional_moments(
            uniform_times(500), np.full(500, 3.25), (600, 1200)
        )
        populated = np.flatnonzero(mom.counts.sum(axis=1) > 0)
        assert populated.tolist() == [19]
        assert np.all(mom.m1[19] == 0.0)
        assert np.all(mom.m2[19] == 0.0)

    def test_pure_drift_moments_exact(self):
        # with a power-of-two slope every product below is exact in floats,
        # so the closed forms hold bitwise
        c = 2.0**-10
        t = uniform_times(2000)
        mom = km.conditional_moments(t, c * t.astype(float), LAGS)
        checked = 0
        for b in range(mom.centers.size):
            for j, lag in enumerate(mom.lags):
                if mom.counts[b, j] == 0:
                    continue
                assert mom.m1[b, j] == c * lag
                assert mom.m2[b, j] == (c * lag) ** 2
                assert mom.se1[b, j] == 0.0
                checked += 1
        assert checked > 20

    def test_ou_transition_mean_oracle(self):
        # exact OU conditional mean x (exp(-k tau) - 1) as an independent
        # oracle; 3 standard errors is a statistical bound, so the seed is
        # pinned and a small miss allowance is kept
        k = 1.0 / 3600.0
        rng = np.random.default_rng(0)
        x = ou_series(200_000, DT, k, 2.0 * k, rng)
        mom = km.conditional_moments(uniform_times(200_000), x, LAGS)
        total = 0
        within = 0
        for b in range(mom.centers.size):
            for j, tau in enumerate(mom.lags):
                if mom.counts[b, j] < mom.min_count:
                    continue
                predicted = mom.anchor_mean[b, j] * (math.exp(-k * tau) - 1.0)
                z = abs(mom.m1[b, j] - predicted) / mom.se1[b, j]
                assert z <= 5.0
                within += z <= 3.0
                total += 1
        assert total >= 50
        assert within / total >= 0.95
        assert np.all(mom.m2[mom.counts >= mom.min_count] >= 0.0)

    def test_lag_validation(self):
        t = uniform_times(100)
        x = np.zeros(100)
        with pytest.raises(DomainError):
            km.conditional_moments(t, x, (600,))
        with pytest.raises(DomainError):
            km.conditional_moments(t, x, (1200, 600))
        with pytest.raises(DomainError):
            km.conditional_moments(t, x, (600, 600))
        with pytest.raises(DomainError):
            km.conditional_moments(t, x, (-600, 600))

    def test_series_validation(self):
        with pytest.raises(DomainError):
            km.conditional_moments(uniform_times(10), np.zeros(9), LAGS)
        with pytest.raises(DomainError):
            km.conditional_moments(
                np.array([0, 600, 600], dtype=np.int64), np.zeros(3), LAGS
            )
        with pytest.raises(InsufficientDataError):
            km.conditional_moments(uniform_times(2), np.zeros(2), (600, 1200))


class TestWindowCorrection:
    def test_round_trip_inverts_window_response(self):
        for k in (1e-5, K_TRUE, 1e-3, 2e-3):
            g = km.window_response(k, LAGS)
            back, saturated = km.correct_rate(g, LAGS)
            assert not saturated
            assert back == pytest.approx(k, rel=1e-10)

    def test_response_is_below_rate_and_monotone(self):
        ks = (1e-5, 1e-4, 1e-3)
        gs = [km.window_response(k, LAGS) for k in ks]
        assert all(g < k for g, k in zip(gs, ks))
        assert gs[0] < gs[1] < gs[2]

    def test_saturation(self):
        g_max = sum(LAGS) / sum(l * l for l in LAGS)
        k, saturated = km.correct_rate(g_max, LAGS)
        assert saturated and math.isinf(k)
        k, saturated = km.correct_rate(0.9 * g_max, LAGS)
        assert not saturated and math.isfinite(k)

    def test_nonpositive_rate_passes_through(self):
        assert km.correct_rate(0.0, LAGS) == (0.0, False)
        assert km.correct_rate(-3e-4, LAGS) == (-3e-4, False)


class TestDriftDiffusion:
    def test_pure_drift_closed_forms(self):
        c = 2.0**-10
        t = uniform_times(2000)
        mom = km.conditional_moments(t, c * t.astype(float), LAGS)
        est = km.drift_diffusion(mom, 600)
        stau2 = math.fsum(float(l) * l for l in LAGS)
        d2_predicted = c * c * math.fsum(float(l) ** 3 for l in LAGS) / (2.0 * stau2)
        for b in np.flatnonzero(est.usable):
            assert est.d1[b] == c
            assert est.d2[b] == pytest.approx(d2_predicted, rel=1e-12)
        # constant drift has no slope against the state
        assert est.k_raw == 0.0
        # no mean reversion means no finite-lag shape to divide out, so the
        # corrected noise level is undefined and the raw one is reported
        assert math.isnan(est.sigma2_corrected)
        assert est.sigma2 == est.sigma2_raw

    def test_white_noise_rate_matches_window_scale(self):
        # for independent snapshots M1 = -x for every lag, so the fitted
        # rate is exactly the window scale sum(tau)/sum(tau^2), and
        # M2 = variance + x^2 sets the diffusion level
        stau = math.fsum(float(l) for l in LAGS)
        stau2 = math.fsum(float(l) * l for l in LAGS)
        for seed in (0, 1):
            rng = np.random.default_rng(seed)
            variance = 2.5
            x = rng.normal(0.0, math.sqrt(variance), 20000)
            mom = km.conditional_moments(uniform_times(20000), x, LAGS)
            est = km.drift_diffusion(mom, 600)
            assert est.k_raw == pytest.approx(stau / stau2, rel=0.05)
            widx = [mom.lags.index(l) for l in est.window_lags]
            taus = np.array(est.window_lags, dtype=float)
            for b in np.flatnonzero(est.usable):
                anchor = mom.anchor_mean[b, widx]
                predicted = (
                    math.fsum(taus * (variance + anchor * anchor)) / stau2 / 2.0
                )
                assert abs(est.d2[b] - predicted) <= 3.0 * est.d2_err[b]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_ou_recovery_short_window(self, seed):
        rng = np.random.default_rng(seed)
        x = ou_series(20000, DT, K_TRUE, S2_TRUE, rng)
        mom = km.conditional_moments(uniform_times(20000), x, LAGS)
        est = km.drift_diffusion(mom, 600)
        assert est.k_corrected == pytest.approx(K_TRUE, rel=0.20)
        assert est.sigma2_corrected == pytest.approx(S2_TRUE, rel=0.20)
        assert not est.saturated
        # the finite-lag slope always underestimates the true rate
        assert est.k_raw < est.k_corrected
        assert est.k == est.k_corrected
        assert est.sigma2 == est.sigma2_corrected

    @pytest.mark.parametrize("seed", [0, 3])
    def test_ou_recovery_markov_length_window(self, seed):
        # the window the pipeline actually uses: lags from the 60 min
        # markov length up to three times that
        lags = tuple(range(600, 10801, 600))
        rng = np.random.default_rng(seed)
        x = ou_series(20000, DT, K_TRUE, S2_TRUE, rng)
        mom = km.conditional_moments(uniform_times(20000), x, lags)
        est = km.drift_diffusion(mom, 3600)
        assert est.window_lags == tuple(range(3600, 10801, 600))
        assert est.k_corrected == pytest.approx(K_TRUE, rel=0.20)
        assert est.sigma2_corrected == pytest.approx(S2_TRUE, rel=0.20)

    @pytest.mark.parametrize("seed", [0, 2])
    def test_d1_antisymmetric_about_mean(self, seed):
        # linearity of the drift makes D1 odd about the series mean; the
        # 3 standard error bound is statistical, so seeds are pinned
        k = 1.0 / 3600.0
        rng = np.random.default_rng(seed)
        x = ou_series(200_000, DT, k, 2.0 * k, rng)
        mom = km.conditional_moments(uniform_times(200_000), x, LAGS)
        est = km.drift_diffusion(mom, 600)
        nbins = est.centers.size
        pairs = 0
        for b in range(nbins // 2):
            r = nbins - 1 - b
            if not (est.usable[b] and est.usable[r]):
                continue
            err = math.sqrt(est.d1_err[b] ** 2 + est.d1_err[r] ** 2)
            assert abs(est.d1[b] + est.d1[r]) <= 3.0 * err
            pairs += 1
        assert pairs >= 5

    def test_bin_enumeration_order_is_irrelevant(self):
        rng = np.random.default_rng(7)
        x = ou_series(20000, DT, K_TRUE, S2_TRUE, rng)
        mom = km.conditional_moments(uniform_times(20000), x, LAGS)
        flipped = dataclasses.replace(
            mom,
            edges=mom.edges[::-1].copy(),
            centers=mom.centers[::-1].copy(),
            counts=mom.counts[::-1].copy(),
            m1=mom.m1[::-1].copy(),
            m2=mom.m2[::-1].copy(),
            se1=mom.se1[::-1].copy(),
            se2=mom.se2[::-1].copy(),
            anchor_mean=mom.anchor_mean[::-1].copy(),
        )
        a = km.drift_diffusion(mom, 600)
        b = km.drift_diffusion(flipped, 600)
        # compensated summation makes every reduction order-independent,
        # so the results agree bitwise, not just approximately
        assert a.k_raw == b.k_raw
        assert a.k_corrected == b.k_corrected
        assert a.intercept == b.intercept
        assert a.sigma2_raw == b.sigma2_raw
        assert a.sigma2_corrected == b.sigma2_corrected
        assert np.array_equal(a.d1, b.d1[::-1], equal_nan=True)
        assert np.array_equal(a.d2, b.d2[::-1], equal_nan=True)

    def test_window_and_bin_errors(self):
        rng = np.random.default_rng(0)
        x = ou_series(20000, DT, K_TRUE, S2_TRUE, rng)
        t = uniform_times(20000)
        mom = km.conditional_moments(t, x, LAGS)
        with pytest.raises(DomainError):
            km.drift_diffusion(mom, 900)
        with pytest.raises(InsufficientDataError):
            km.drift_diffusion(mom, 1800)  # window [1800, 5400] holds one lag
        starved = km.conditional_moments(t, x, LAGS, min_count=10**6)
        with pytest.raises(InsufficientDataError):
            km.drift_diffusion(starved, 600)


class TestOUExtract:
    @staticmethod
    def estimate_with(k, sigma2):
        nan3 = np.full(3, np.nan)
        return km.KMEstimate(
            centers=np.array([-1.0, 0.0, 1.0]),
            d1=nan3,
            d1_err=nan3,
            d2=nan3,
            d2_err=nan3,
            counts=np.zeros(3),
            usable=np.zeros(3, dtype=bool),
            window_lags=LAGS,
            tau_l=600,
            k_raw=k * 0.9,
            k_corrected=k,
            saturated=False,
            intercept=0.0,
            sigma2_raw=sigma2 * 0.9,
            sigma2_corrected=sigma2,
        )

    def test_target_constants_stationary_law(self):
        est = self.estimate_with(K_TRUE, S2_TRUE)
        ou = km.ou_extract(est, constant_pattern(0.7))
        assert ou.stationary_variance == pytest.approx(4.4e-5, abs=0.05e-5)
        assert ou.response_time == pytest.approx(5.0e3, abs=50.0)
        assert ou.sigma == math.sqrt(S2_TRUE)
        # construction identity; exact for these constants, never worse
        # than one rounding in general
        assert ou.stationary_variance * 2.0 * ou.k / ou.sigma2 == 1.0

    def test_identity_within_one_rounding_generally(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            k = math.exp(rng.uniform(-12.0, 0.0))
            s2 = math.exp(rng.uniform(-20.0, 0.0))
            ou = km.ou_extract(self.estimate_with(k, s2), constant_pattern(0.0))
            assert abs(ou.stationary_variance * 2.0 * k / s2 - 1.0) <= 3e-16

    def test_constant_pattern_fixed_point_is_exact(self):
        level = 0.734
        ou = km.ou_extract(self.estimate_with(K_TRUE, S2_TRUE), constant_pattern(level))
        assert ou.minutes.size == 390
        assert np.all(ou.phi_f_series == level)

    def test_linear_pattern_shifts_fixed_point(self):
        # phi_f = pattern + (1/k) * slope, with the per-minute slope
        # converted to per-second
        slope, intercept = 1e-4, 0.7
        pattern = DailyPattern(
            parameter_name="phi",
            degree=1,
            coeffs=(slope, intercept),
            residual_rms=0.0,
            session_minutes=390,
        )
        minutes = np.array([0.0, 100.0, 389.0])
        ou = km.ou_extract(self.estimate_with(K_TRUE, S2_TRUE), pattern, minutes)
        expected = (slope * minutes + intercept) + slope / 60.0 / K_TRUE
        assert ou.phi_f_series == pytest.approx(expected.tolist(), rel=1e-12)

    def test_nonpositive_rate_rejected(self):
        est = self.estimate_with(K_TRUE, S2_TRUE)
        for bad in (0.0, -1e-4):
            broken = dataclasses.replace(est, k_raw=bad, k_corrected=math.nan)
            with pytest.raises(DomainError, match="not mean-reverting"):
                km.ou_extract(broken, constant_pattern(0.0))

    def test_as_dict_round_trips(self):
        ou = km.ou_extract(self.estimate_with(K_TRUE, S2_TRUE), constant_pattern(0.7))
        loaded = jsonio.loads(jsonio.dumps(ou.as_dict()))
        assert loaded["k"] == pytest.approx(K_TRUE)
        assert loaded["stationary_variance"] == pytest.approx(4.4446e-5, rel=1e-3)
        assert len(loaded["phi_f"]) == 390


class TestAutocorrRegimes:
    def test_single_ou_reads_as_one_regime(self):
        # a single OU must not be split in two; the refit collapses the
        # breakpoint and both times agree (measured within 6% of truth at
        # this length, asserted at 10%)
        tau = 3600.0
        for seed in (0, 3, 6):
            rng = np.random.default_rng(seed)
            x = ou_series(1_000_000, 60, 1.0 / tau, 2.0 / tau, rng)
            reg = km.autocorrelation_regimes(x, max_lag=600, dt=60.0)
            assert not reg.unreliable
            assert reg.breakpoint_seconds is None
            assert reg.tau_short == reg.tau_long
            assert reg.tau_short == pytest.approx(tau, rel=0.10)

    def test_two_time_scales_recovered(self):
        # 0.2 h and 6.5 h components (measured within 6% at this length,
        # asserted at the documented 25%)
        tau_s, tau_l = 720.0, 23400.0
        for seed in (100, 104):
            rng = np.random.default_rng(seed)
            xs = ou_series(1_000_000, 60, 1.0 / tau_s, 2.0 / tau_s, rng)
            xl = ou_series(1_000_000, 60, 1.0 / tau_l, 2.0 / tau_l, rng)
            x = np.sqrt(0.7) * xs + np.sqrt(0.3) * xl
            reg = km.autocorrelation_regimes(x, max_lag=600, dt=60.0)
            assert not reg.unreliable
            assert reg.tau_short == pytest.approx(tau_s, rel=0.25)
            assert reg.tau_long == pytest.approx(tau_l, rel=0.25)
            assert tau_s < reg.breakpoint_seconds < tau_l

    def test_white_noise_flagged_unreliable(self):
        for seed in (200, 201, 202, 203):
            rng = np.random.default_rng(seed)
            x = rng.normal(0.0, 1.0, 40000)
            reg = km.autocorrelation_regimes(x, max_lag=600, dt=60.0)
            assert reg.unreliable
            assert reg.breakpoint_seconds is None
            assert math.isnan(reg.tau_short) and math.isnan(reg.tau_long)
            # 2/sqrt(N) is a per-lag bound, not a uniform one: over 600
            # lags a few percent of excursions beyond it are expected
            outside = np.mean(np.abs(reg.values[1:]) > reg.noise_threshold)
            assert outside <= 0.10

    def test_estimator_invariants(self):
        rng = np.random.default_rng(5)
        x = ou_series(40000, 60, 1.0 / 600.0, 2.0 / 600.0, rng)
        reg = km.autocorrelation_regimes(x, max_lag=100, dt=60.0, k_hat=K_TRUE)
        assert reg.values[0] == 1.0
        assert np.all(np.abs(reg.values) <= 1.0 + 1e-12)
        assert reg.lag_seconds[0] == 0.0 and reg.lag_seconds[-1] == 6000.0
        assert reg.k_marker_seconds == pytest.approx(1.0 / K_TRUE)
        assert reg.noise_threshold == pytest.approx(2.0 / math.sqrt(40000))

    def test_threshold_override_is_echoed(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0.0, 1.0, 4000)
        reg = km.autocorrelation_regimes(x, max_lag=10, dt=60.0, noise_threshold=0.5)
        assert reg.noise_threshold == 0.5
        assert reg.unreliable

    def test_as_dict_round_trips(self):
        rng = np.random.default_rng(5)
        x = ou_series(40000, 60, 1.0 / 600.0, 2.0 / 600.0, rng)
        reg = km.autocorrelation_regimes(x, max_lag=50, dt=60.0)
        loaded = jsonio.loads(jsonio.dumps(reg.as_dict()))
        assert set(loaded) == {
            "lag_seconds",
            "autocorrelation",
            "breakpoint_seconds",
            "tau_short_seconds",
            "tau_long_seconds",
            "unreliable",
            "k_marker_seconds",
            "noise_threshold",
        }
        assert loaded["autocorrelation"][0] == 1.0

    def test_validation(self):
        with pytest.raises(DomainError):
            km.autocorrelation_regimes(np.zeros(100), max_lag=2, dt=60.0)
        with pytest.raises(DomainError):
            km.autocorrelation_regimes(np.ones(100) * 2.0, max_lag=10, dt=60.0)
        with pytest.raises(DomainError):
            km.autocorrelation_regimes(np.arange(30.0), max_lag=10, dt=60.0)


class TestReportAndBand:
    @staticmethod
    def fitted_estimate():
        rng = np.random.default_rng(0)
        x = ou_series(20000, DT, K_TRUE, S2_TRUE, rng)
        mom = km.conditional_moments(uniform_times(20000), x, LAGS)
        return km.drift_diffusion(mom, 600)

    def test_km_report_keys_and_round_trip(self):
        est = self.fitted_estimate()
        report = km.km_report(est)
        assert {
            "bins",
            "D1",
            "D1_err",
            "D2",
            "D2_err",
            "k_raw",
            "k_corrected",
            "sigma2",
            "markov_length_used",
            "stationary_variance",
        } <= set(report)
        loaded = jsonio.loads(jsonio.dumps(report))
        assert loaded["markov_length_used"] == 600
        assert loaded["k_corrected"] == pytest.approx(est.k_corrected)
        assert loaded["sigma2"] == pytest.approx(est.sigma2_corrected)
        assert loaded["stationary_variance"] == pytest.approx(
            est.sigma2 / (2.0 * est.k)
        )
        assert len(loaded["D1"]) == len(loaded["bins"]) == 20

    def test_band_csv_layout(self, tmp_path):
        est = self.fitted_estimate()
        ou = km.ou_extract(est, constant_pattern(0.7))
        buffer = io.StringIO()
        km.write_band_csv(buffer, ou, prelude=["run abc123"])
        lines = buffer.getvalue().splitlines()
        assert lines[0] == "# run abc123"
        assert lines[1] == "t_d_minutes,phi_f,lower,upper"
        assert len(lines) == 2 + 390
        first = lines[2].split(",")
        assert float(first[0]) == 0.0
        half = math.sqrt(ou.stationary_variance)
        assert float(first[2]) == pytest.approx(float(first[1]) - half)
        assert float(first[3]) == pytest.approx(float(first[1]) + half)

    def test_band_csv_to_file(self, tmp_path):
        est = self.fitted_estimate()
        ou = km.ou_extract(est, constant_pattern(0.7))
        path = tmp_path / "band.csv"
        km.write_band_csv(path, ou)
        lines = path.read_text().splitlines()
        assert lines[0] == "t_d_minutes,phi_f,lower,upper"
        assert len(lines) == 1 + 390
