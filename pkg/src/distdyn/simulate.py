"""Langevin simulation, analytic OU oracles, and synthetic data generation.

Single-path integration is plain Euler-Maruyama; the identified model has
constant diffusion, so a higher-order (Milstein) scheme would add terms
that are identically zero.  Every spec carries its own seed, generators
are counter-based (Philox) keyed through SeedSequence, and ensembles
derive one child stream per path index, so results never depend on
scheduling.

The synthetic dataset generator steps the parameter fluctuation with the
exact OU transition (not Euler), because its output exists to measure the
estimation pipeline: discretization bias in the generator would be
indistinguishable from estimator bias downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import models
from .detrend import DailyPattern
from .errors import DomainError, GeneratorAbort, NegativeDiffusionError
from .ingest import SnapshotSeries, TradingCalendar

SECONDS_PER_DAY = 86400
MAX_STEP_REJECTIONS = 1000


def _generator(seed) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def _spawn(seed, n: int) -> list:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


@dataclass(frozen=True)
class LangevinSpec1D:
    """One-dimensional dx = drift(x) dt + sqrt(diffusion(x)) dW."""

    drift: Callable[[float], float]
    diffusion: Callable[[float], float]
    x0: float
    dt: float
    n_steps: int
    seed: object

    def __post_init__(self):
        if not self.dt > 0.0:
            raise DomainError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise DomainError(f"n_steps must be at least 1, got {self.n_steps}")


def euler_maruyama(spec: LangevinSpec1D) -> np.ndarray:
    """Integrate the 1D Langevin equation; returns n_steps + 1 states.

    x_{i+1} = x_i + drift(x_i) dt + sqrt(diffusion(x_i) dt) xi_i with unit
    normals from the spec's seeded generator.  A negative diffusion value
    aborts with the offending step and state in the exception.
    """
    rng = _generator(spec.seed)
    eps = rng.standard_normal(spec.n_steps)
    path = np.empty(spec.n_steps + 1)
    x = float(spec.x0)
    path[0] = x
    dt = spec.dt
    for i in range(spec.n_steps):
        d2 = spec.diffusion(x)
        if d2 < 0.0:
            raise NegativeDiffusionError(step=i, state=x, value=d2)
        x = x + spec.drift(x) * dt + math.sqrt(d2 * dt) * eps[i]
        path[i + 1] = x
    return path


@dataclass(frozen=True)
class OUAnalytic:
    """Closed-form transition law of dx = -k (x - phi_f) dt + sigma dW."""

    k: float
    sigma: float
    phi_f: float
    phi0: float
    t0: float

    def __post_init__(self):
        if not self.k > 0.0:
            raise DomainError(f"relaxation rate must be positive, got {self.k}")
        if self.sigma < 0.0:
            raise DomainError(f"noise amplitude must be nonnegative, got {self.sigma}")


def ou_mean_var(a: OUAnalytic, t: float) -> tuple[float, float]:
    """Exact mean and variance at time t of a path started at (t0, phi0)."""
    if t < a.t0:
        raise DomainError(f"t={t} precedes the initial time t0={a.t0}")
    decay = math.exp(-a.k * (t - a.t0))
    mean = a.phi0 * decay + a.phi_f * (1.0 - decay)
    variance = a.sigma * a.sigma / (2.0 * a.k) * (1.0 - decay * decay)
    return mean, variance


def ou_spec(a: OUAnalytic, dt: float, n_steps: int, seed) -> LangevinSpec1D:
    """Euler-Maruyama spec whose exact law is the given OU process."""
    k, phi_f, s2 = a.k, a.phi_f, a.sigma * a.sigma
    return LangevinSpec1D(
        drift=lambda x: -k * (x - phi_f),
        diffusion=lambda x: s2,
        x0=a.phi0,
        dt=dt,
        n_steps=n_steps,
        seed=seed,
    )


def ou_checkpoint_report(
    a: OUAnalytic,
    dt: float,
    n_paths: int,
    checkpoints,
    seed,
) -> dict:
    """Ensemble mean/variance against the closed forms at given times.

    checkpoints are absolute times (>= t0); each path runs on its own
    child stream, so the report is independent of evaluation order.
    """
    if n_paths < 2:
        raise DomainError("need at least 2 paths")
    times = [float(t) for t in checkpoints]
    if not times:
        raise DomainError("need at least one checkpoint")
    steps = []
    for t in times:
        exact = (t - a.t0) / dt
        step = int(round(exact))
        if abs(exact - step) > 1e-9 or step < 0:
            raise DomainError(f"checkpoint {t} is not on the dt grid from t0")
        steps.append(step)
    n_steps = max(steps)
    if n_steps < 1:
        raise DomainError("latest checkpoint must lie after t0")

    samples = np.empty((n_paths, len(times)))
    for j, child in enumerate(_spawn(seed, n_paths)):
        path = euler_maruyama(ou_spec(a, dt, n_steps, child))
        samples[j] = path[steps]

    rows = []
    for c, t in enumerate(times):
        mean, variance = ou_mean_var(a, t)
        col = samples[:, c]
        s_mean = math.fsum(col) / n_paths
        centered = col - s_mean
        s_var = math.fsum(centered * centered) / (n_paths - 1)
        se_mean = math.sqrt(s_var / n_paths)
        se_var = s_var * math.sqrt(2.0 / (n_paths - 1))
        rows.append(
            {
                "t": t,
                "analytic_mean": mean,
                "analytic_variance": variance,
                "sample_mean": s_mean,
                "sample_variance": s_var,
                "se_mean": se_mean,
                "se_variance": se_var,
                "z_mean": (s_mean - mean) / se_mean if se_mean > 0 else math.nan,
                "z_variance": (s_var - variance) / se_var if se_var > 0 else math.nan,
            }
        )
    zs = [
        abs(r[key])
        for r in rows
        for key in ("z_mean", "z_variance")
        if math.isfinite(r[key])
    ]
    return {
        "n_paths": n_paths,
        "dt": dt,
        "checkpoints": rows,
        "max_abs_z": max(zs) if zs else math.nan,
    }


@dataclass(frozen=True)
class CoupledLangevinSpec:
    """Two coupled Langevin equations driven by two independent noises.

    d(phi)   = h1 dt + g11 dW1 + g12 dW2
    d(theta) = h2 dt + g21 dW1 + g22 dW2

    All six coefficient functions take (phi, theta).  The induced
    diffusion matrix g g^T is positive semidefinite by construction, so
    no runtime check is needed.
    """

    h1: Callable[[float, float], float]
    h2: Callable[[float, float], float]
    g11: Callable[[float, float], float]
    g12: Callable[[float, float], float]
    g21: Callable[[float, float], float]
    g22: Callable[[float, float], float]
    phi0: float
    theta0: float
    dt: float
    n_steps: int
    seed: object

    def __post_init__(self):
        if not self.dt > 0.0:
            raise DomainError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise DomainError(f"n_steps must be at least 1, got {self.n_steps}")


def simulate_coupled(spec: CoupledLangevinSpec) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama for the coupled pair; returns (phi_path, theta_path).

    The two noise sources run on separate child streams of the spec seed
    (child 0 drives dW1, child 1 drives dW2), so a decoupled system
    reproduces two independent 1D runs with those child seeds exactly.
    """
    c1, c2 = _spawn(spec.seed, 2)
    eps1 = _generator(c1).standard_normal(spec.n_steps)
    eps2 = _generator(c2).standard_normal(spec.n_steps)
    phi = np.empty(spec.n_steps + 1)
    theta = np.empty(spec.n_steps + 1)
    p, q = float(spec.phi0), float(spec.theta0)
    phi[0], theta[0] = p, q
    dt = spec.dt
    rt = math.sqrt(dt)
    for i in range(spec.n_steps):
        dw1 = rt * eps1[i]
        dw2 = rt * eps2[i]
        p_next = p + spec.h1(p, q) * dt + spec.g11(p, q) * dw1 + spec.g12(p, q) * dw2
        q_next = q + spec.h2(p, q) * dt + spec.g21(p, q) * dw1 + spec.g22(p, q) * dw2
        p, q = p_next, q_next
        phi[i + 1] = p
        theta[i + 1] = q
    return phi, theta


@dataclass(frozen=True)
class MomentEvolutionSpec:
    """A family moment F_n(phi, theta) riding on coupled parameter dynamics."""

    family: models.ModelFamily
    coupled: CoupledLangevinSpec
    order: int

    def __post_init__(self):
        if not isinstance(self.family, models.ModelFamily):
            raise DomainError(f"unknown model family: {self.family!r}")
        if not isinstance(self.order, (int, np.integer)) or self.order < 1:
            raise DomainError(f"moment order must be a positive integer, got {self.order!r}")


def moment_sde_coefficients(spec: MomentEvolutionSpec, state: tuple[float, float]):
    """Drift and the two noise loadings of the induced moment equation.

    d(F_n) = A dt + B dW1 + C dW2 by Ito's formula:
      A = F_phi h1 + F_theta h2 + F_phitheta (g11 g21 + g12 g22)
          + (1/2) F_phiphi (g11^2 + g12^2) + (1/2) F_thetatheta (g21^2 + g22^2)
      B = F_phi g11 + F_theta g21
      C = F_phi g12 + F_theta g22

    Returns (A, B, C), or DIVERGENT when the moment does not exist at the
    state (the caller decides whether that is fatal).
    """
    p, q = float(state[0]), float(state[1])
    partials = models.moment_partials(models.ModelParams(spec.family, p, q), spec.order)
    if partials is models.DIVERGENT:
        return models.DIVERGENT
    c = spec.coupled
    g11, g12 = c.g11(p, q), c.g12(p, q)
    g21, g22 = c.g21(p, q), c.g22(p, q)
    a = (
        partials.d_phi * c.h1(p, q)
        + partials.d_theta * c.h2(p, q)
        + partials.d_phi_theta * (g11 * g21 + g12 * g22)
        + 0.5 * partials.d_phi2 * (g11 * g11 + g12 * g12)
        + 0.5 * partials.d_theta2 * (g21 * g21 + g22 * g22)
    )
    b = partials.d_phi * g11 + partials.d_theta * g21
    cc = partials.d_phi * g12 + partials.d_theta * g22
    return a, b, cc


def verify_moment_evolution(spec: MomentEvolutionSpec, horizon: float, n_paths: int) -> dict:
    """Integrate the induced moment equation against direct evaluation.

    Along each noise realization the moment is advanced with the
    coefficients above and compared with F_n evaluated at the integrated
    parameter state; the gap is the Ito-Taylor remainder, shrinking at
    strong order 1/2 in dt for noisy parameters and order 1 for
    deterministic ones.  Reports the worst gap anywhere and the mean
    end-of-horizon gap (the convergence-study statistic).
    """
    if n_paths < 1:
        raise DomainError("need at least one path")
    c = spec.coupled
    n_steps = int(round(horizon / c.dt))
    if n_steps < 1:
        raise DomainError("horizon shorter than one step")
    rt = math.sqrt(c.dt)

    def family_value(p, q, step):
        try:
            value = models.moment(models.ModelParams(spec.family, p, q), spec.order)
        except DomainError as exc:
            raise DomainError(
                f"parameter path left the family domain at step {step}: {exc}"
            ) from exc
        if value is models.DIVERGENT:
            raise DomainError(
                f"moment of order {spec.order} diverged at step {step}, "
                f"state ({p:g}, {q:g})"
            )
        return value

    max_gap = 0.0
    end_gaps = []
    for child in _spawn(c.seed, n_paths):
        c1, c2 = child.spawn(2)
        eps1 = _generator(c1).standard_normal(n_steps)
        eps2 = _generator(c2).standard_normal(n_steps)
        p, q = float(c.phi0), float(c.theta0)
        m = family_value(p, q, 0)
        for i in range(n_steps):
            coeffs = moment_sde_coefficients(spec, (p, q))
            if coeffs is models.DIVERGENT:
                raise DomainError(
                    f"moment of order {spec.order} diverged at step {i}, "
                    f"state ({p:g}, {q:g})"
                )
            a, b, cc = coeffs
            dw1 = rt * eps1[i]
            dw2 = rt * eps2[i]
            m = m + a * c.dt + b * dw1 + cc * dw2
            g11, g12 = c.g11(p, q), c.g12(p, q)
            g21, g22 = c.g21(p, q), c.g22(p, q)
            p_next = p + c.h1(p, q) * c.dt + g11 * dw1 + g12 * dw2
            q_next = q + c.h2(p, q) * c.dt + g21 * dw1 + g22 * dw2
            p, q = p_next, q_next
            gap = abs(m - family_value(p, q, i + 1))
            if gap > max_gap:
                max_gap = gap
        end_gaps.append(abs(m - family_value(p, q, n_steps)))
    return {
        "family": spec.family.value,
        "order": spec.order,
        "dt": c.dt,
        "n_steps": n_steps,
        "n_paths": n_paths,
        "horizon": horizon,
        "max_discrepancy": max_gap,
        "mean_end_error": math.fsum(end_gaps) / n_paths,
    }


@dataclass(frozen=True)
class SyntheticDataset:
    """Generator output: the snapshot series plus ground truth and accounting.

    phi/theta are the exact per-slot parameter values behind each
    snapshot; recovery tests compare pipeline estimates against them.
    rejections counts resampled fluctuation steps (proposals that would
    have pushed the shape parameter nonpositive).
    """

    series: SnapshotSeries
    phi: np.ndarray
    theta: np.ndarray
    phi_star: np.ndarray
    rejections: int
    proposals: int

    @property
    def rejection_rate(self) -> float:
        return self.rejections / self.proposals if self.proposals else 0.0


def generate_synthetic_dataset(
    phi_pattern: DailyPattern,
    theta_pattern: DailyPattern,
    ou: OUAnalytic,
    n_entities: int,
    days: int,
    seed,
    cal: TradingCalendar | None = None,
    epoch_day0: int = 0,
    max_rejection_rate: float = 0.10,
) -> SyntheticDataset:
    """Inverse-gamma snapshots whose shape parameter rides an OU process.

    Per trading slot: phi(t) = phi_pattern(t_d) + phi*(t) with phi*
    stepped by the exact OU transition (including overnight gaps at their
    true duration), theta(t) = theta_pattern(t_d); the snapshot is
    n_entities i.i.d. InverseGamma(phi, theta) draws.  Steps proposing a
    nonpositive phi are redrawn and counted; a rejection rate above
    max_rejection_rate aborts, because then the requested pattern is
    inconsistent with the requested fluctuation scale.
    """
    if n_entities < 1:
        raise DomainError("n_entities must be at least 1")
    if days < 1:
        raise DomainError("days must be at least 1")
    cal = cal if cal is not None else TradingCalendar()
    path_child, entity_child = _spawn(seed, 2)
    path_rng = _generator(path_child)
    entity_rng = _generator(entity_child)

    slot_minutes = np.arange(cal.session_length_intervals) * cal.interval_minutes
    phi_bar = np.asarray(phi_pattern.evaluate(slot_minutes.astype(float)), dtype=float)
    theta_bar = np.asarray(theta_pattern.evaluate(slot_minutes.astype(float)), dtype=float)

    stationary_sd = ou.sigma / math.sqrt(2.0 * ou.k)

    def step(x, gap_seconds, floor):
        """Exact OU transition over gap_seconds, resampled until phi > floor."""
        nonlocal rejections, proposals
        decay = math.exp(-ou.k * gap_seconds)
        mean = ou.phi_f + (x - ou.phi_f) * decay
        sd = stationary_sd * math.sqrt(1.0 - decay * decay)
        for _ in range(MAX_STEP_REJECTIONS):
            proposals += 1
            proposal = mean + sd * path_rng.standard_normal()
            if proposal > floor:
                return proposal
            rejections += 1
        raise GeneratorAbort(
            f"gave up after {MAX_STEP_REJECTIONS} rejected fluctuation proposals "
            f"(pattern value {-floor:g} cannot stay above the fluctuation scale)"
        )

    rejections = 0
    proposals = 0
    times = []
    snapshots = []
    phi_series = np.empty(days * cal.session_length_intervals)
    theta_series = np.empty_like(phi_series)
    star_series = np.empty_like(phi_series)

    x = ou.phi0
    if phi_bar[0] + x <= 0.0:
        raise GeneratorAbort(
            f"initial shape parameter {phi_bar[0] + x:g} is not positive"
        )
    i = 0
    for d in range(days):
        day_start = (epoch_day0 + d) * SECONDS_PER_DAY
        for s in range(cal.session_length_intervals):
            if i > 0:
                gap = (
                    cal.interval_seconds
                    if s > 0
                    else SECONDS_PER_DAY - (cal.session_length_intervals - 1) * cal.interval_seconds
                )
                x = step(x, gap, -phi_bar[s])
            phi_t = phi_bar[s] + x
            theta_t = theta_bar[s]
            params = models.ModelParams(models.ModelFamily.INVERSE_GAMMA, phi_t, theta_t)
            # a shape parameter close to zero makes the gamma draw underflow
            # and the reciprocal overflow; that is a failed generation, not
            # a numerical footnote
            with np.errstate(divide="ignore", over="ignore"):
                values = models.sample(params, n_entities, entity_rng)
            if not np.isfinite(values).all():
                raise GeneratorAbort(
                    f"nonfinite snapshot draw at slot {i} "
                    f"(shape parameter {phi_t:g} is too close to zero)"
                )
            times.append(day_start + (cal.session_open_minute + s * cal.interval_minutes) * 60)
            snapshots.append(values)
            star_series[i] = x
            phi_series[i] = phi_t
            theta_series[i] = theta_t
            i += 1

    rate = rejections / proposals if proposals else 0.0
    if rate > max_rejection_rate:
        raise GeneratorAbort(
            f"rejection rate {rate:.1%} exceeds {max_rejection_rate:.0%}: "
            "pattern inconsistent with the fluctuation scale"
        )
    series = SnapshotSeries(
        times=times,
        snapshots=snapshots,
        mask=[True] * len(times),
        report=None,
    )
    return SyntheticDataset(
        series=series,
        phi=phi_series,
        theta=theta_series,
        phi_star=star_series,
        rejections=rejections,
        proposals=proposals,
    )
