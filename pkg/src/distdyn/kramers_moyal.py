"""Drift and diffusion extraction from detrended parameter series.

Conditional increment moments per state bin feed finite-lag estimates of
the Kramers-Moyal coefficients: D1 from the through-origin slope of the
first moment against lag, D2 from half the slope of the second moment.
A linear fit of D1 against the bin center yields the relaxation rate k;
the squared noise amplitude sigma^2 (the dW coefficient of
dphi = -k phi dt + sigma dW, equal to twice the factorial-normalized D2)
comes from the count-weighted diffusion level.  sigma^2 is a variance
rate per second throughout; phi itself is dimensionless.

The tau -> 0 limit in the coefficient definition is unreachable below
the Markov length, so slopes run over a window of lags at or above it;
the induced underestimate of k is removed by inverting the exact OU
transition mean over the same window (k_raw and k_corrected are both
reported).

Moment accumulation uses exact (correctly rounded) summation so results
are identical no matter how the increments are chunked or ordered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detrend import DailyPattern
from .errors import DomainError, InsufficientDataError

DEFAULT_BINS = 20
DEFAULT_MIN_COUNT = 100
DEFAULT_WINDOW_FACTOR = 3.0


def _clean_series(times, values):
    t = np.asarray(times, dtype=np.int64)
    v = np.asarray(values, dtype=float)
    if t.size != v.size:
        raise DomainError("times and values must have equal length")
    if t.size and np.any(np.diff(t) <= 0):
        raise DomainError("times must be strictly increasing")
    keep = np.isfinite(v)
    return t[keep], v[keep]


@dataclass(frozen=True)
class ConditionalMoments:
    """Increment moments per state bin and lag.

    m1/m2 are means of (x_{t+tau} - x_t) and its square over anchors
    falling in the bin; se1/se2 are their standard errors; anchor_mean is
    the mean anchor value per bin (for oracle comparisons against exact
    transition moments).  used/gap_excluded/out_of_range count anchor
    pairs per lag; used + gap_excluded + out_of_range equals the number
    of candidate pairs exactly.
    """

    edges: np.ndarray
    centers: np.ndarray
    lags: tuple
    counts: np.ndarray  # [bin, lag]
    m1: np.ndarray
    m2: np.ndarray
    se1: np.ndarray
    se2: np.ndarray
    anchor_mean: np.ndarray
    used: tuple
    gap_excluded: tuple
    out_of_range: tuple
    total_pairs: tuple
    min_count: int

    @property
    def usable(self) -> np.ndarray:
        """Bins meeting min_count at every lag."""
        return (self.counts >= self.min_count).all(axis=1)


def conditional_moments(
    times,
    values,
    lags,
    bins: int = DEFAULT_BINS,
    min_count: int = DEFAULT_MIN_COUNT,
) -> ConditionalMoments:
    """First and second conditional increment moments on a state grid.

    Increments require a sample at exactly anchor time + lag, so pairs
    that would cross an overnight gap (or any dropped snapshot) are
    excluded rather than contaminated; the bookkeeping fields account
    for every candidate pair.
    """
    lags = tuple(int(l) for l in lags)
    if len(lags) < 2:
        raise DomainError("need at least 2 lags")
    if any(l <= 0 for l in lags) or sorted(lags) != list(lags) or len(set(lags)) != len(lags):
        raise DomainError("lags must be positive, ascending and distinct")
    t, v = _clean_series(times, values)
    if t.size < 3:
        raise InsufficientDataError("series too short for increments", stage="km")
    mean = float(v.mean())
    std = float(v.std())
    edges = np.linspace(mean - 3.0 * std, mean + 3.0 * std, bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])

    counts = np.zeros((bins, len(lags)), dtype=np.int64)
    m1 = np.full((bins, len(lags)), np.nan)
    m2 = np.full((bins, len(lags)), np.nan)
    se1 = np.full((bins, len(lags)), np.nan)
    se2 = np.full((bins, len(lags)), np.nan)
    anchor_mean = np.full((bins, len(lags)), np.nan)
    used = []
    gap_excluded = []
    out_of_range = []
    total_pairs = []

    for j, lag in enumerate(lags):
        candidates = int(np.searchsorted(t, t[-1] - lag, side="right"))
        anchors = np.arange(candidates)
        target = t[anchors] + lag
        pos = np.minimum(np.searchsorted(t, target), t.size - 1)
        matched = t[pos] == target
        x = v[anchors]
        in_range = (x >= edges[0]) & (x <= edges[-1])
        keep = matched & in_range
        gap = int(candidates - matched.sum())
        oor = int((matched & ~in_range).sum())
        used.append(int(keep.sum()))
        gap_excluded.append(gap)
        out_of_range.append(oor)
        total_pairs.append(candidates)

        x = x[keep]
        inc = v[pos[keep]] - x
        bin_of = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
        for b in range(bins):
            sel = bin_of == b
            n = int(sel.sum())
            counts[b, j] = n
            if n == 0:
                continue
            d = inc[sel]
            s1 = math.fsum(d)
            s2 = math.fsum(d * d)
            s4 = math.fsum((d * d) * (d * d))
            m1[b, j] = s1 / n
            m2[b, j] = s2 / n
            anchor_mean[b, j] = math.fsum(x[sel]) / n
            se1[b, j] = math.sqrt(max(s2 / n - (s1 / n) ** 2, 0.0) / n)
            se2[b, j] = math.sqrt(max(s4 / n - (s2 / n) ** 2, 0.0) / n)

    return ConditionalMoments(
        edges=edges,
        centers=centers,
        lags=lags,
        counts=counts,
        m1=m1,
        m2=m2,
        se1=se1,
        se2=se2,
        anchor_mean=anchor_mean,
        used=tuple(used),
        gap_excluded=tuple(gap_excluded),
        out_of_range=tuple(out_of_range),
        total_pairs=tuple(total_pairs),
        min_count=min_count,
    )


@dataclass(frozen=True)
class KMEstimate:
    centers: np.ndarray
    d1: np.ndarray
    d1_err: np.ndarray
    d2: np.ndarray
    d2_err: np.ndarray
    counts: np.ndarray  # anchor counts at tau_l, used as fit weights
    usable: np.ndarray
    window_lags: tuple
    tau_l: int
    k_raw: float
    k_corrected: float
    saturated: bool
    intercept: float
    sigma2_raw: float
    sigma2_corrected: float

    @property
    def k(self) -> float:
        """Bias-corrected rate when invertible, raw otherwise."""
        return self.k_corrected if math.isfinite(self.k_corrected) else self.k_raw

    @property
    def sigma2(self) -> float:
        """Bias-corrected noise level when available, raw otherwise."""
        return self.sigma2_corrected if math.isfinite(self.sigma2_corrected) else self.sigma2_raw


def _wls_line(x, y, w):
    sw = math.fsum(w)
    sx = math.fsum(w * x)
    sy = math.fsum(w * y)
    sxx = math.fsum(w * x * x)
    sxy = math.fsum(w * x * y)
    denom = sw * sxx - sx * sx
    if denom == 0.0:
        raise DomainError("degenerate weighted fit")
    slope = (sw * sxy - sx * sy) / denom
    intercept = (sy - slope * sx) / sw
    return slope, intercept


def window_response(k: float, window_lags) -> float:
    """Through-origin slope the window would report for a true rate k.

    For an OU process the first conditional moment is
    x (exp(-k tau) - 1), so the fitted slope of D1 against the state is
    -sum(tau (1 - exp(-k tau))) / sum(tau^2) rather than -k.
    """
    num = math.fsum(tau * (1.0 - math.exp(-k * tau)) for tau in window_lags)
    den = math.fsum(tau * tau for tau in window_lags)
    return num / den


def correct_rate(k_raw: float, window_lags) -> tuple[float, bool]:
    """Invert window_response; (inf, True) when k_raw saturates the window."""
    if k_raw <= 0.0:
        return k_raw, False
    g_max = math.fsum(window_lags) / math.fsum(tau * tau for tau in window_lags)
    if k_raw >= g_max * (1.0 - 1e-12):
        return math.inf, True
    lo, hi = 0.0, 1.0 / max(window_lags)
    while window_response(hi, window_lags) < k_raw:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if window_response(mid, window_lags) < k_raw:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi), False


def drift_diffusion(
    moments: ConditionalMoments,
    tau_l: int,
    window_factor: float = DEFAULT_WINDOW_FACTOR,
) -> KMEstimate:
    """Per-bin D1/D2 from slopes over lags in [tau_l, window_factor*tau_l],
    then k from a weighted line through the D1 values and sigma^2 from the
    weighted diffusion level."""
    tau_l = int(tau_l)
    if tau_l not in moments.lags:
        raise DomainError(f"tau_l={tau_l} is not among the computed lags")
    window = tuple(l for l in moments.lags if tau_l <= l <= window_factor * tau_l)
    if len(window) < 2:
        raise InsufficientDataError("fewer than 2 lags in the slope window", stage="km")
    widx = [moments.lags.index(l) for l in window]
    taus = np.array(window, dtype=float)
    denom = math.fsum(taus * taus)

    bins = moments.centers.size
    d1 = np.full(bins, np.nan)
    d1_err = np.full(bins, np.nan)
    d2 = np.full(bins, np.nan)
    d2_err = np.full(bins, np.nan)
    usable = np.zeros(bins, dtype=bool)
    for b in range(bins):
        if not all(moments.counts[b, j] >= moments.min_count for j in widx):
            continue
        usable[b] = True
        m1 = moments.m1[b, widx]
        m2 = moments.m2[b, widx]
        s1 = moments.se1[b, widx]
        s2 = moments.se2[b, widx]
        d1[b] = math.fsum(taus * m1) / denom
        d1_err[b] = math.sqrt(math.fsum((taus * s1) ** 2)) / denom
        d2[b] = math.fsum(taus * m2) / denom / 2.0
        d2_err[b] = math.sqrt(math.fsum((taus * s2) ** 2)) / denom / 2.0
    if usable.sum() < 3:
        raise InsufficientDataError("fewer than 3 usable bins", stage="km")

    weights = moments.counts[:, moments.lags.index(tau_l)].astype(float)
    mask = usable
    slope, intercept = _wls_line(moments.centers[mask], d1[mask], weights[mask])
    k_raw = -slope
    k_corrected, saturated = correct_rate(k_raw, window)
    # sigma^2 is the squared dW amplitude: twice the factorial-normalized
    # diffusion coefficient, so that the stationary variance is sigma^2/(2k)
    sigma2_raw = 2.0 * math.fsum(weights[mask] * d2[mask]) / math.fsum(weights[mask])
    sigma2_corrected = _corrected_noise_level(moments, widx, taus, mask, weights, k_corrected)
    return KMEstimate(
        centers=moments.centers,
        d1=d1,
        d1_err=d1_err,
        d2=d2,
        d2_err=d2_err,
        counts=weights,
        usable=usable,
        window_lags=window,
        tau_l=tau_l,
        k_raw=k_raw,
        k_corrected=k_corrected,
        saturated=saturated,
        intercept=intercept,
        sigma2_raw=sigma2_raw,
        sigma2_corrected=sigma2_corrected,
    )


def _corrected_noise_level(moments, widx, taus, mask, weights, k):
    """Noise level with the finite-lag shape divided out.

    At the lags actually usable (at or above the Markov length) the
    increment variance of an OU process is sigma^2 (1-exp(-2k tau))/(2k)
    plus the squared transition-mean shift, not sigma^2 tau, so the plain
    slope underestimates sigma^2.  Removing the mean shift with the
    per-bin anchor mean and regressing on the exact variance shape makes
    the estimate unbiased for OU input.
    """
    if not (math.isfinite(k) and k > 0.0):
        return math.nan
    shape = (1.0 - np.exp(-2.0 * k * taus)) / (2.0 * k)
    shape_norm = math.fsum(shape * shape)
    per_bin = []
    per_weight = []
    for b in np.flatnonzero(mask):
        m2 = moments.m2[b, widx]
        drift_part = (moments.anchor_mean[b, widx] * -np.expm1(-k * taus)) ** 2
        per_bin.append(math.fsum(shape * (m2 - drift_part)) / shape_norm)
        per_weight.append(weights[b])
    return math.fsum(np.asarray(per_weight) * np.asarray(per_bin)) / math.fsum(per_weight)


@dataclass(frozen=True)
class OUParams:
    k: float
    sigma: float
    sigma2: float
    minutes: np.ndarray
    phi_f_series: np.ndarray
    stationary_variance: float
    response_time: float

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "sigma": self.sigma,
            "sigma2": self.sigma2,
            "response_time_seconds": self.response_time,
            "stationary_variance": self.stationary_variance,
            "minutes": self.minutes,
            "phi_f": self.phi_f_series,
        }


def ou_extract(km: KMEstimate, pattern: DailyPattern, minutes=None) -> OUParams:
    """Fixed-point series phi_f(t_d) = pattern + (1/k) d(pattern)/dt and
    the stationary law of the extracted OU process.

    The pattern derivative is analytic in the fitted polynomial (per
    minute, converted to per second); finite differences of the raw slot
    means would be amplified by 1/k.
    """
    k = km.k
    if not math.isfinite(k) or k <= 0.0:
        raise DomainError("not mean-reverting: k must be positive")
    if minutes is None:
        minutes = np.arange(float(pattern.session_minutes))
    minutes = np.asarray(minutes, dtype=float)
    phi_f = pattern.evaluate(minutes) + (1.0 / k) * (pattern.derivative(minutes) / 60.0)
    return OUParams(
        k=k,
        sigma=math.sqrt(km.sigma2),
        sigma2=km.sigma2,
        minutes=minutes,
        phi_f_series=phi_f,
        stationary_variance=km.sigma2 / (2.0 * k),
        response_time=1.0 / k,
    )


@dataclass(frozen=True)
class AutocorrRegimes:
    lag_seconds: np.ndarray
    values: np.ndarray
    breakpoint_seconds: float | None
    tau_short: float
    tau_long: float
    unreliable: bool
    k_marker_seconds: float | None
    noise_threshold: float

    def as_dict(self) -> dict:
        return {
            "lag_seconds": self.lag_seconds,
            "autocorrelation": self.values,
            "breakpoint_seconds": self.breakpoint_seconds,
            "tau_short_seconds": self.tau_short,
            "tau_long_seconds": self.tau_long,
            "unreliable": self.unreliable,
            "k_marker_seconds": self.k_marker_seconds,
            "noise_threshold": self.noise_threshold,
        }


def _weighted_log_line(secs, vals):
    """Fit vals ~ A exp(-t/tau) by weighted log-space least squares.

    Weights proportional to vals^2 undo the noise amplification of the
    log transform (delta method), so the reliable large-value lags
    dominate and the noisy tail cannot steer the slope.  Returns
    (tau, amplitude) or None when the fit is not a decay.
    """
    w = vals * vals
    y = np.log(vals)
    try:
        slope, intercept = _wls_line(secs, y, w)
    except DomainError:
        return None
    if slope >= 0.0:
        return None
    return -1.0 / slope, math.exp(intercept)


def autocorrelation_regimes(
    values,
    max_lag: int,
    dt: float,
    k_hat: float | None = None,
    noise_threshold: float | None = None,
    separation_factor: float = 4.0,
    evidence_factor: float = 25.0,
) -> AutocorrRegimes:
    """Biased autocorrelation plus a two-segment exponential decomposition.

    Only the leading contiguous run of lags above the white-noise band
    (default 2/sqrt(N)) enters the fits; the breakpoint between the
    short and long regime minimizes the combined linear-space residual,
    with the long component peeled off the short segment before its fit.
    The split is kept only when the fitted times are at least
    separation_factor apart AND the two-segment model shrinks the
    squared residual by at least evidence_factor relative to a single
    exponential over the whole run; otherwise that single exponential is
    the answer (breakpoint None, equal times).  A series whose
    autocorrelation never clears the band, or never decays, is flagged
    unreliable.
    """
    v = np.asarray(values, dtype=float)
    n = v.size
    if max_lag < 3:
        raise DomainError("max_lag must be at least 3")
    if n < 4 * max_lag:
        raise DomainError("series length must be at least 4*max_lag")
    xc = v - v.mean()
    denom = float(np.dot(xc, xc))
    if denom == 0.0:
        raise DomainError("constant series has no autocorrelation")
    ac = np.empty(max_lag + 1)
    ac[0] = 1.0
    for h in range(1, max_lag + 1):
        ac[h] = float(np.dot(xc[:-h], xc[h:])) / denom
    lag_seconds = np.arange(max_lag + 1) * float(dt)
    if noise_threshold is None:
        noise_threshold = 2.0 / math.sqrt(n)

    # a physical decay stays above the noise band until it dies; once the
    # autocorrelation first sinks into the band, later isolated crossings
    # are noise, so only the leading contiguous run of lags is usable
    above = ac[1:] > noise_threshold
    run = int(above.size if above.all() else np.argmin(above))
    usable = np.arange(1, run + 1)
    best = None
    if usable.size >= 6:
        vals = ac[usable]
        secs = usable * float(dt)
        for i in range(3, usable.size - 2):
            long = _weighted_log_line(secs[i:], vals[i:])
            if long is None:
                continue
            tau_long, amp_long = long
            # peel the long component off the short segment; when nothing
            # is left above it the decay is a single regime and the short
            # segment is fitted directly
            floor = amp_long * np.exp(-secs[:i] / tau_long)
            peeled = vals[:i] - floor
            pos = peeled > 0.0
            if int(pos.sum()) >= 3:
                short = _weighted_log_line(secs[:i][pos], peeled[pos])
                if short is None:
                    continue
                tau_short, amp_short = short
                model_short = amp_short * np.exp(-secs[:i] / tau_short) + floor
            else:
                short = _weighted_log_line(secs[:i], vals[:i])
                if short is None:
                    continue
                tau_short, amp_short = short
                model_short = amp_short * np.exp(-secs[:i] / tau_short)
            resid_short = vals[:i] - model_short
            resid_long = vals[i:] - amp_long * np.exp(-secs[i:] / tau_long)
            sse = float(np.dot(resid_short, resid_short) + np.dot(resid_long, resid_long))
            if best is None or sse < best[0]:
                best = (sse, float(secs[i]), tau_short, tau_long)
    if best is not None:
        single = _weighted_log_line(usable * float(dt), ac[usable])
        keep_split = max(best[2], best[3]) >= separation_factor * min(best[2], best[3])
        if keep_split and single is not None:
            # a split with two extra parameters always shaves some residual
            # off; demand a decisive reduction before reading two regimes
            resid = ac[usable] - single[1] * np.exp(-usable * float(dt) / single[0])
            keep_split = float(np.dot(resid, resid)) >= evidence_factor * best[0]
        if not keep_split and single is not None:
            best = (best[0], None, single[0], single[0])
    if best is None:
        return AutocorrRegimes(
            lag_seconds=lag_seconds,
            values=ac,
            breakpoint_seconds=None,
            tau_short=math.nan,
            tau_long=math.nan,
            unreliable=True,
            k_marker_seconds=None if k_hat is None else 1.0 / k_hat,
            noise_threshold=noise_threshold,
        )
    return AutocorrRegimes(
        lag_seconds=lag_seconds,
        values=ac,
        breakpoint_seconds=best[1],
        tau_short=best[2],
        tau_long=best[3],
        unreliable=False,
        k_marker_seconds=None if k_hat is None else 1.0 / k_hat,
        noise_threshold=noise_threshold,
    )


def km_report(est: KMEstimate) -> dict:
    return {
        "bins": est.centers,
        "D1": est.d1,
        "D1_err": est.d1_err,
        "D2": est.d2,
        "D2_err": est.d2_err,
        "counts": est.counts,
        "usable": [bool(u) for u in est.usable],
        "k_raw": est.k_raw,
        "k_corrected": est.k_corrected,
        "saturated": est.saturated,
        "intercept": est.intercept,
        "sigma2": est.sigma2,
        "sigma2_raw": est.sigma2_raw,
        "sigma2_corrected": est.sigma2_corrected,
        "markov_length_used": est.tau_l,
        "stationary_variance": est.sigma2 / (2.0 * est.k) if est.k > 0 else math.nan,
    }


def write_band_csv(path, ou: OUParams, prelude: list[str] | None = None) -> None:
    """Fixed point with the stationary one-sigma band per session minute."""
    from .jsonio import format_float

    half = math.sqrt(ou.stationary_variance)
    lines = [f"# {text}" for text in (prelude or [])]
    lines.append("t_d_minutes,phi_f,lower,upper")
    for m, f in zip(ou.minutes, ou.phi_f_series):
        lines.append(
            ",".join(
                (
                    format_float(float(m)),
                    format_float(float(f)),
                    format_float(float(f - half)),
                    format_float(float(f + half)),
                )
            )
        )
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
