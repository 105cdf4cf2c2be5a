"""Daily-pattern extraction and detrending of parameter series.

Each trading day shows a systematic intraday shape in the fitted
parameters.  The shape is estimated two ways: a slot-aligned moving
average over a centered window of trading days (the detrending actually
applied to produce fluctuation series), and a low-degree polynomial in
the intraday minute fitted to the all-days slot means (the compact
summary consumed by the drift correction downstream).  Outside the
trading session the pattern is defined to be zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InsufficientDataError
from .ingest import SECONDS_PER_DAY, TradingCalendar, intraday_minute

PHI_DEGREE = 3
THETA_DEGREE = 2


@dataclass(frozen=True)
class DailyPattern:
    """Polynomial intraday pattern in t_d (minutes since session open)."""

    parameter_name: str
    degree: int
    coeffs: tuple  # highest power first
    residual_rms: float
    session_minutes: int

    def __post_init__(self):
        if len(self.coeffs) != self.degree + 1:
            raise DomainError("coefficient count must be degree + 1")

    def evaluate(self, t_d) -> np.ndarray:
        t = np.asarray(t_d, dtype=float)
        inside = (t >= 0.0) & (t < self.session_minutes)
        out = np.where(inside, np.polyval(self.coeffs, t), 0.0)
        return out if out.ndim else float(out)

    def derivative(self, t_d):
        """d(pattern)/d(t_d) per minute; zero outside the session."""
        t = np.asarray(t_d, dtype=float)
        inside = (t >= 0.0) & (t < self.session_minutes)
        deriv = np.polyval(np.polyder(np.asarray(self.coeffs, dtype=float)), t)
        out = np.where(inside, deriv, 0.0)
        return out if out.ndim else float(out)

    def as_dict(self) -> dict:
        return {
            "parameter": self.parameter_name,
            "degree": self.degree,
            "coeffs": list(self.coeffs),
            "residual_rms": self.residual_rms,
        }


def pattern_from_dict(d: dict, session_minutes: int = 390) -> DailyPattern:
    return DailyPattern(
        parameter_name=d["parameter"],
        degree=int(d["degree"]),
        coeffs=tuple(float(c) for c in d["coeffs"]),
        residual_rms=float(d["residual_rms"]),
        session_minutes=session_minutes,
    )


def _slot_matrix(times, values, cal: TradingCalendar):
    """Arrange a trading-time series as a (day, intraday slot) matrix."""
    t = np.asarray(times, dtype=np.int64)
    v = np.asarray(values, dtype=float)
    if t.size != v.size:
        raise DomainError("times and values must have equal length")
    if t.size == 0:
        raise InsufficientDataError("empty series", stage="detrend")
    n_slots = cal.session_length_intervals
    minutes = np.array([intraday_minute(int(ts), cal) for ts in t])
    slots = minutes // cal.interval_minutes
    if np.any((slots < 0) | (slots >= n_slots) | (minutes % cal.interval_minutes != 0)):
        raise DomainError("series contains non-trading or off-grid times")
    days = t // SECONDS_PER_DAY
    day_list = np.unique(days)
    day_index = {d: i for i, d in enumerate(day_list)}
    matrix = np.full((day_list.size, n_slots), np.nan)
    for ts, sl, val in zip(days, slots, v):
        matrix[day_index[ts], sl] = val
    rows = np.array([day_index[d] for d in days])
    return matrix, rows, slots.astype(np.int64)


def moving_daily_pattern(times, values, cal: TradingCalendar, window_days: int = 20) -> np.ndarray:
    """Slot-aligned centered moving mean over trading days.

    For the point at day d and intraday slot j the pattern is the mean of
    the values at slot j on the window_days trading days centered on d
    (window_days // 2 before, the rest after, center included); windows
    are truncated at the ends of the series.  Calendar gaps do not count:
    only days present in the series enter the window.
    """
    if window_days < 1:
        raise DomainError("window_days must be >= 1")
    matrix, rows, slots = _slot_matrix(times, values, cal)
    n_days = matrix.shape[0]
    if n_days < 2:
        raise InsufficientDataError("series spans fewer than 2 trading days", stage="detrend")
    before = window_days // 2
    after = window_days - before - 1
    pattern_rows = np.empty_like(matrix)
    with warnings.catch_warnings():
        # a slot absent from every day of a truncated window is a nan
        # pattern cell, which is fine: no sample sits there to detrend
        warnings.simplefilter("ignore", RuntimeWarning)
        for d in range(n_days):
            lo = max(0, d - before)
            hi = min(n_days, d + after + 1)
            pattern_rows[d] = np.nanmean(matrix[lo:hi], axis=0)
    return pattern_rows[rows, slots]


def fit_daily_polynomial(t_d, values, degree: int, parameter_name: str = "phi",
                         session_minutes: int = 390) -> DailyPattern:
    """OLS polynomial in the intraday minute, numerically domain-mapped."""
    t = np.asarray(t_d, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = np.isfinite(v)
    t, v = t[keep], v[keep]
    if np.unique(t).size < degree + 1:
        raise DomainError(
            f"need at least {degree + 1} distinct intraday slots for degree {degree}"
        )
    fitted = np.polynomial.Polynomial.fit(t, v, deg=degree).convert()
    coeffs = np.zeros(degree + 1)
    coeffs[: fitted.coef.size] = fitted.coef  # ascending
    resid = np.polyval(coeffs[::-1], t) - v
    return DailyPattern(
        parameter_name=parameter_name,
        degree=degree,
        coeffs=tuple(coeffs[::-1]),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        session_minutes=session_minutes,
    )


@dataclass
class DailyDecomposition:
    """Series split into pattern and fluctuations, plus pattern summaries.

    pattern_values is the per-time moving-window pattern actually
    subtracted; slot_minutes/slot_means is the all-days average shape the
    polynomial is fitted to.  pattern_values + fluctuations reconstructs
    the input (bit-exact when values and pattern share binades, which
    holds for any realistically scaled parameter series).
    """

    parameter_name: str
    times: np.ndarray
    values: np.ndarray
    pattern_values: np.ndarray
    fluctuations: np.ndarray
    window_days: int
    slot_minutes: np.ndarray
    slot_means: np.ndarray
    polynomial: DailyPattern
    calendar: TradingCalendar

    def reconstruct(self) -> np.ndarray:
        return self.pattern_values + self.fluctuations

    def intraday_minutes(self) -> np.ndarray:
        return np.array(
            [intraday_minute(int(t), self.calendar) for t in self.times], dtype=float
        )

    def polynomial_fluctuations(self) -> np.ndarray:
        """Fluctuations against the fitted polynomial pattern instead of
        the moving window; lower-noise when the true pattern is itself a
        low-degree polynomial."""
        return self.values - self.polynomial.evaluate(self.intraday_minutes())


def decompose(times, values, cal: TradingCalendar, window_days: int = 20,
              parameter_name: str = "phi", degree: int | None = None) -> DailyDecomposition:
    """Split a parameter series into daily pattern and fluctuations."""
    if degree is None:
        degree = PHI_DEGREE if parameter_name == "phi" else THETA_DEGREE
    t = np.asarray(times, dtype=np.int64)
    v = np.asarray(values, dtype=float)
    pattern_values = moving_daily_pattern(t, v, cal, window_days)
    fluctuations = v - pattern_values

    matrix, _, _ = _slot_matrix(t, v, cal)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        slot_means = np.nanmean(matrix, axis=0)
    slot_minutes = np.arange(cal.session_length_intervals, dtype=float) * cal.interval_minutes
    polynomial = fit_daily_polynomial(
        slot_minutes, slot_means, degree, parameter_name, cal.session_minutes
    )
    return DailyDecomposition(
        parameter_name=parameter_name,
        times=t,
        values=v,
        pattern_values=pattern_values,
        fluctuations=fluctuations,
        window_days=window_days,
        slot_minutes=slot_minutes,
        slot_means=slot_means,
        polynomial=polynomial,
        calendar=cal,
    )


def write_decomposition_csv(path, dec: DailyDecomposition, prelude: list[str] | None = None) -> None:
    from .jsonio import format_float

    lines = [f"# {text}" for text in (prelude or [])]
    lines.append("time,raw,pattern,fluctuation")
    for t, raw, pat, fl in zip(dec.times, dec.values, dec.pattern_values, dec.fluctuations):
        lines.append(
            ",".join((str(int(t)), format_float(raw), format_float(pat), format_float(fl)))
        )
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
