"""Empirical CDFs and least-squares family fits per snapshot.

Fitting happens on the cumulative distribution rather than the density
because the tail of a histogram estimate is far noisier than the tail of
the ECDF.  The objective is the unweighted sum of squared CDF residuals
over the unique support points; positivity-constrained parameters are
optimized in log space with a plain Nelder-Mead simplex (gradients of
incomplete-gamma CDFs with respect to shape are costly, the objective is
smooth and two-dimensional, so a simplex is both robust and fast).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InsufficientDataError, UnderdeterminedError
from .models import ModelFamily, ModelParams, cdf

MAX_ITERATIONS = 500
STALL_REL = 1e-10


@dataclass(frozen=True)
class EmpiricalCDF:
    """Unique ascending support with cumulative probabilities and widths.

    widths are forward differences of the support, the last width copied
    from its predecessor so every point carries one.  counts holds the
    multiplicity of each support value in the originating sample; for
    externally constructed grids (e.g. exact quantiles of a known model)
    it stays empty and probs need not reach 1.
    """

    support: np.ndarray
    probs: np.ndarray
    widths: np.ndarray
    counts: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        s, p, w = self.support, self.probs, self.widths
        if s.ndim != 1 or s.size == 0:
            raise DomainError("ecdf support must be a nonempty 1-D array")
        if s.size != p.size or s.size != w.size:
            raise DomainError("ecdf arrays must have equal length")
        if np.any(~(s > 0.0)):
            raise DomainError("ecdf support must be positive")
        if s.size > 1 and np.any(np.diff(s) <= 0.0):
            raise DomainError("ecdf support must be strictly increasing")
        if np.any(~(p > 0.0)) or np.any(p > 1.0):
            raise DomainError("ecdf probs must lie in (0, 1]")
        if s.size > 1 and np.any(np.diff(p) <= 0.0):
            raise DomainError("ecdf probs must be strictly increasing")
        if np.any(~(w > 0.0)):
            raise DomainError("ecdf widths must be positive")

    @property
    def n(self) -> int:
        return int(self.counts.sum()) if self.counts.size else self.support.size


def empirical_cdf(sample, min_entities: int = 10) -> EmpiricalCDF:
    """ECDF of a positive sample: F(s_i) = (count of values <= s_i) / n."""
    arr = np.asarray(sample, dtype=float).ravel()
    if arr.size < min_entities:
        raise InsufficientDataError(
            f"sample of {arr.size} below minimum {min_entities}", stage="ecdf"
        )
    if np.any(~(arr > 0.0)) or np.any(~np.isfinite(arr)):
        raise DomainError("ecdf requires positive finite values")
    support, counts = np.unique(arr, return_counts=True)
    probs = np.cumsum(counts) / arr.size
    if support.size > 1:
        widths = np.empty_like(support)
        widths[:-1] = np.diff(support)
        widths[-1] = widths[-2]
    else:
        widths = np.array([1.0])
    return EmpiricalCDF(support=support, probs=probs, widths=widths, counts=counts)


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    sse: float
    converged: bool
    iterations: int


def _moments_from_ecdf(ecdf: EmpiricalCDF) -> tuple[float, float]:
    if ecdf.counts.size:
        weights = ecdf.counts / ecdf.counts.sum()
    else:
        weights = np.full(ecdf.support.size, 1.0 / ecdf.support.size)
    m = float(np.dot(weights, ecdf.support))
    v = float(np.dot(weights, (ecdf.support - m) ** 2))
    return m, v


def initial_params(ecdf: EmpiricalCDF, family: ModelFamily) -> ModelParams:
    """Method-of-moments starting point (the optimizer refines from here)."""
    m, v = _moments_from_ecdf(ecdf)
    v = max(v, 1e-30 * m * m, 1e-300)
    if family is ModelFamily.GAMMA:
        phi = m * m / v
        theta = v / m
    elif family is ModelFamily.INVERSE_GAMMA:
        phi = m * m / v + 2.0
        theta = m * (phi - 1.0)
    elif family is ModelFamily.LOG_NORMAL:
        log_s = np.log(ecdf.support)
        if ecdf.counts.size:
            w = ecdf.counts / ecdf.counts.sum()
        else:
            w = np.full(log_s.size, 1.0 / log_s.size)
        phi = float(np.dot(w, log_s))
        theta = math.sqrt(max(float(np.dot(w, (log_s - phi) ** 2)), 1e-30))
        return ModelParams(family, phi, theta)
    else:
        # linearize 1 - F = exp(-(s/theta)^phi) and regress on log s
        keep = ecdf.probs < 1.0
        if np.count_nonzero(keep) >= 2:
            x = np.log(ecdf.support[keep])
            y = np.log(-np.log1p(-ecdf.probs[keep]))
            slope, intercept = np.polyfit(x, y, 1)
            phi = max(slope, 1e-6)
            theta = math.exp(-intercept / phi)
        else:
            phi = 1.0
            theta = m
    phi = min(max(phi, 1e-8), 1e8)
    theta = min(max(theta, 1e-300), 1e300)
    return ModelParams(family, phi, theta)


def _encode(params: ModelParams) -> np.ndarray:
    if params.family is ModelFamily.LOG_NORMAL:
        return np.array([params.phi, math.log(params.theta)])
    return np.array([math.log(params.phi), math.log(params.theta)])


def _decode(u: np.ndarray, family: ModelFamily) -> ModelParams | None:
    try:
        if family is ModelFamily.LOG_NORMAL:
            return ModelParams(family, float(u[0]), math.exp(u[1]))
        return ModelParams(family, math.exp(u[0]), math.exp(u[1]))
    except (OverflowError, DomainError):
        return None


def sse_objective(ecdf: EmpiricalCDF, params: ModelParams | None) -> float:
    if params is None:
        return math.inf
    try:
        resid = cdf(params, ecdf.support) - ecdf.probs
    except (DomainError, FloatingPointError, OverflowError):
        return math.inf
    value = float(np.dot(resid, resid))
    return value if math.isfinite(value) else math.inf


def _nelder_mead(fun, u0: np.ndarray) -> tuple[np.ndarray, float, bool, int]:
    """Two-parameter simplex descent, log-space coordinates.

    Returns (best point, best value, converged, iterations); converged
    means the simplex function spread stalled below the relative
    threshold before the iteration cap.
    """
    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5
    step = 0.05
    n = u0.size
    points = [u0.copy()]
    for i in range(n):
        p = u0.copy()
        p[i] += step
        points.append(p)
    values = [fun(p) for p in points]

    iterations = 0
    converged = False
    while iterations < MAX_ITERATIONS:
        order = np.argsort(values, kind="stable")
        points = [points[i] for i in order]
        values = [values[i] for i in order]
        f_best, f_worst = values[0], values[-1]
        if math.isfinite(f_best) and (
            f_worst - f_best <= STALL_REL * max(abs(f_best), 1e-12)
        ):
            converged = True
            break
        iterations += 1

        centroid = np.mean(points[:-1], axis=0)
        reflected = centroid + alpha * (centroid - points[-1])
        f_r = fun(reflected)
        if f_r < values[0]:
            expanded = centroid + gamma * (reflected - centroid)
            f_e = fun(expanded)
            if f_e < f_r:
                points[-1], values[-1] = expanded, f_e
            else:
                points[-1], values[-1] = reflected, f_r
        elif f_r < values[-2]:
            points[-1], values[-1] = reflected, f_r
        else:
            if f_r < f_worst:
                contracted = centroid + rho * (reflected - centroid)
                f_c = fun(contracted)
                accept = f_c <= f_r
            else:
                contracted = centroid - rho * (centroid - points[-1])
                f_c = fun(contracted)
                accept = f_c < f_worst
            if accept:
                points[-1], values[-1] = contracted, f_c
            else:
                best = points[0]
                points = [best] + [best + sigma * (p - best) for p in points[1:]]
                values = [values[0]] + [fun(p) for p in points[1:]]

    best_idx = int(np.argmin(values))
    return points[best_idx], values[best_idx], converged, iterations


def fit_model(
    ecdf: EmpiricalCDF, family: ModelFamily, fixed_theta: float | None = None
) -> FitResult:
    """Least-squares fit of one family to an empirical CDF.

    With fixed_theta the scale is pinned and only the shape parameter is
    searched; a two-parameter fit cannot resolve the shape tightly enough
    for calibration checks where the scale is known a priori.
    """
    if ecdf.support.size < 2:
        raise UnderdeterminedError(
            f"underdetermined: single support point cannot constrain {family.value}"
        )
    start = initial_params(ecdf, family)

    if fixed_theta is not None:
        if not (fixed_theta > 0 and math.isfinite(fixed_theta)):
            raise DomainError("fixed_theta must be positive and finite")

        def decode1(u):
            try:
                if family is ModelFamily.LOG_NORMAL:
                    return ModelParams(family, float(u[0]), fixed_theta)
                return ModelParams(family, math.exp(u[0]), fixed_theta)
            except (OverflowError, DomainError):
                return None

        def fun1(u):
            return sse_objective(ecdf, decode1(u))

        if family is ModelFamily.LOG_NORMAL:
            u0 = np.array([start.phi])
        else:
            u0 = np.array([math.log(start.phi)])
        u_best, f_best, converged, iterations = _nelder_mead(fun1, u0)
        params = decode1(u_best)
        if params is None:
            params = ModelParams(family, start.phi, fixed_theta)
            f_best = sse_objective(ecdf, params)
            converged = False
        return FitResult(params=params, sse=f_best, converged=converged, iterations=iterations)

    def fun(u):
        return sse_objective(ecdf, _decode(u, family))

    u_best, f_best, converged, iterations = _nelder_mead(fun, _encode(start))
    params = _decode(u_best, family)
    if params is None:  # only reachable if the whole search diverged
        params = start
        f_best = sse_objective(ecdf, start)
        converged = False
    return FitResult(params=params, sse=f_best, converged=converged, iterations=iterations)


@dataclass
class ParamTimeSeries:
    """Per-snapshot fit results for all four families.

    fits[i] maps family -> FitResult for times[i]; fit_errors[i] maps
    family -> message for cells that could not be fitted.  Divergence
    scores are attached by the ranking stage.
    """

    times: list
    fits: list
    fit_errors: list

    def column(self, family: ModelFamily, attr: str = "phi") -> np.ndarray:
        """Extract one parameter as a time-aligned array (nan where failed)."""
        out = np.full(len(self.times), np.nan)
        for i, cell in enumerate(self.fits):
            res = cell.get(family)
            if res is not None:
                out[i] = getattr(res.params, attr) if attr in ("phi", "theta") else getattr(res, attr)
        return out


def write_param_series(path, pts: ParamTimeSeries, prelude: list[str] | None = None) -> None:
    """CSV with one row per fitted (time, family); failed cells are gaps.

    Error messages for failed cells travel in the JSON run report, not
    here, so the column set stays fixed.
    """
    from .jsonio import format_float

    lines = [f"# {text}" for text in (prelude or [])]
    lines.append("time,family,phi,theta,sse,converged")
    for t, cell in zip(pts.times, pts.fits):
        for family in ModelFamily:
            res = cell.get(family)
            if res is None:
                continue
            lines.append(
                ",".join(
                    (
                        str(int(t)),
                        family.value,
                        format_float(res.params.phi),
                        format_float(res.params.theta),
                        format_float(res.sse),
                        "true" if res.converged else "false",
                    )
                )
            )
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def read_param_series(path) -> ParamTimeSeries:
    """Inverse of write_param_series (iteration counts are not persisted)."""
    import csv as _csv

    if hasattr(path, "read"):
        raw = path.read()
    else:
        with open(path) as fh:
            raw = fh.read()
    rows = [
        r
        for r in _csv.reader(line for line in raw.splitlines() if not line.startswith("#"))
        if r
    ]
    if not rows or rows[0] != ["time", "family", "phi", "theta", "sse", "converged"]:
        raise DomainError("unrecognized parameter-series header")
    by_time: dict[int, dict] = {}
    for row in rows[1:]:
        t = int(row[0])
        family = ModelFamily(row[1])
        by_time.setdefault(t, {})[family] = FitResult(
            params=ModelParams(family, float(row[2]), float(row[3])),
            sse=float(row[4]),
            converged=row[5] == "true",
            iterations=0,
        )
    times = sorted(by_time)
    return ParamTimeSeries(
        times=times,
        fits=[by_time[t] for t in times],
        fit_errors=[{} for _ in times],
    )


def fit_all(series, min_entities: int = 10, threads: int = 1) -> ParamTimeSeries:
    """Fit every family at every trading snapshot; failures never abort."""
    idxs = series.trading_indices()
    if not idxs:
        raise InsufficientDataError("no trading snapshots to fit", stage="fit")

    def fit_one(i):
        values = series.snapshots[i]
        cell: dict = {}
        errors: dict = {}
        try:
            e = empirical_cdf(values, min_entities=min_entities)
        except (InsufficientDataError, DomainError) as exc:
            return {f: None for f in ModelFamily}, {f: str(exc) for f in ModelFamily}
        for family in ModelFamily:
            try:
                cell[family] = fit_model(e, family)
            except (UnderdeterminedError, DomainError) as exc:
                cell[family] = None
                errors[family] = str(exc)
        return cell, errors

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fit_one, idxs))
    else:
        results = [fit_one(i) for i in idxs]

    return ParamTimeSeries(
        times=[series.times[i] for i in idxs],
        fits=[cell for cell, _ in results],
        fit_errors=[err for _, err in results],
    )
