"""The four biparametric families: densities, CDFs, moments, sampling.

Each family is parametrized by a shape-like ``phi`` and a scale-like
``theta`` (for the log-normal these are the log-mean and log-std).  All
densities are evaluated in log space and exponentiated last, so extreme
arguments degrade to 0 instead of overflowing.

Moments that do not exist (inverse-gamma with order >= phi) are reported
as the :data:`DIVERGENT` sentinel rather than raised or returned as inf,
so callers must branch on them explicitly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import special
from .errors import DomainError

_LOG_SQRT_TWO_PI = 0.5 * math.log(2.0 * math.pi)


class ModelFamily(enum.Enum):
    """The four candidate families, in rank tie-break order."""

    GAMMA = "gamma"
    INVERSE_GAMMA = "inverse_gamma"
    LOG_NORMAL = "log_normal"
    WEIBULL = "weibull"

    @property
    def tie_break_order(self) -> int:
        return _TIE_ORDER[self]


_TIE_ORDER = {f: i for i, f in enumerate(ModelFamily)}


class Divergent:
    """Sentinel for moments whose defining integral does not exist."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DIVERGENT"


DIVERGENT = Divergent()


@dataclass(frozen=True)
class ModelParams:
    """Validated (family, phi, theta) triple.

    Gamma, inverse-gamma and Weibull require both parameters positive;
    log-normal requires theta > 0 with phi any finite real.  Validation
    happens once here, not on every evaluation call.
    """

    family: ModelFamily
    phi: float
    theta: float

    def __post_init__(self):
        if not isinstance(self.family, ModelFamily):
            raise DomainError(f"unknown model family: {self.family!r}")
        phi, theta = self.phi, self.theta
        if not (math.isfinite(phi) and math.isfinite(theta)):
            raise DomainError(
                f"{self.family.value} parameters must be finite, got phi={phi}, theta={theta}"
            )
        if not theta > 0.0:
            raise DomainError(f"{self.family.value} requires theta > 0, got {theta}")
        if self.family is not ModelFamily.LOG_NORMAL and not phi > 0.0:
            raise DomainError(f"{self.family.value} requires phi > 0, got {phi}")


def _as_positive_array(s, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(s, dtype=float)
    scalar = arr.ndim == 0
    flat = np.atleast_1d(arr)
    if flat.size == 0:
        return flat, scalar
    if np.any(~(flat > 0.0)):
        bad = flat[~(flat > 0.0)]
        raise DomainError(f"{what} requires s > 0, got {bad.flat[0]}")
    return flat, scalar


def log_pdf(params: ModelParams, s):
    """Log of the density; -inf where the density underflows."""
    x, scalar = _as_positive_array(s, "pdf")
    phi, theta = params.phi, params.theta
    with np.errstate(over="ignore", divide="ignore"):
        if params.family is ModelFamily.GAMMA:
            out = (
                (phi - 1.0) * np.log(x)
                - x / theta
                - phi * math.log(theta)
                - math.lgamma(phi)
            )
        elif params.family is ModelFamily.INVERSE_GAMMA:
            out = (
                phi * math.log(theta)
                - math.lgamma(phi)
                - (phi + 1.0) * np.log(x)
                - theta / x
            )
        elif params.family is ModelFamily.LOG_NORMAL:
            z = (np.log(x) - phi) / theta
            out = -0.5 * z * z - np.log(x) - math.log(theta) - _LOG_SQRT_TWO_PI
        else:
            r = x / theta
            out = (
                math.log(phi / theta)
                + (phi - 1.0) * np.log(r)
                - np.power(r, phi)
            )
    return float(out[0]) if scalar else out


def pdf(params: ModelParams, s):
    """Density of the family at s > 0."""
    lp = log_pdf(params, s)
    with np.errstate(over="ignore"):
        return math.exp(lp) if np.isscalar(lp) else np.exp(lp)


def cdf(params: ModelParams, s):
    """Cumulative distribution at s > 0.

    Gamma uses the regularized lower incomplete gamma of s/theta, the
    inverse-gamma the regularized upper incomplete gamma of theta/s, the
    log-normal the standard normal CDF of (log s - phi)/theta, and the
    Weibull its closed form 1 - exp(-(s/theta)^phi).
    """
    x, scalar = _as_positive_array(s, "cdf")
    phi, theta = params.phi, params.theta
    if params.family is ModelFamily.GAMMA:
        out = special.reg_lower_gamma(phi, x / theta)
    elif params.family is ModelFamily.INVERSE_GAMMA:
        out = special.reg_upper_gamma(phi, theta / x)
    elif params.family is ModelFamily.LOG_NORMAL:
        out = special.normal_cdf((np.log(x) - phi) / theta)
    else:
        with np.errstate(over="ignore"):
            out = -np.expm1(-np.power(x / theta, phi))
    out = np.atleast_1d(out)
    return float(out[0]) if scalar else out


def moment(params: ModelParams, n: int):
    """n-th raw moment in closed form, or DIVERGENT when it does not exist."""
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise DomainError(f"moment order must be a positive integer, got {n!r}")
    n = int(n)
    phi, theta = params.phi, params.theta
    if params.family is ModelFamily.GAMMA:
        return theta**n * math.exp(math.lgamma(phi + n) - math.lgamma(phi))
    if params.family is ModelFamily.INVERSE_GAMMA:
        if n >= phi:
            return DIVERGENT
        return theta**n * math.exp(math.lgamma(phi - n) - math.lgamma(phi))
    if params.family is ModelFamily.LOG_NORMAL:
        return math.exp(n * phi + 0.5 * n * n * theta * theta)
    return theta**n * math.exp(math.lgamma(1.0 + n / phi))


@dataclass(frozen=True)
class MomentPartials:
    """Closed-form moment F_n(phi, theta) with first and second partials."""

    value: float
    d_phi: float
    d_theta: float
    d_phi2: float
    d_theta2: float
    d_phi_theta: float


def moment_partials(params: ModelParams, n: int):
    """First and second partial derivatives of the n-th moment in (phi, theta).

    These feed the induced SDE for the moment of a snapshot distribution
    whose parameters follow Langevin dynamics.  Returns DIVERGENT when the
    moment itself does not exist.
    """
    value = moment(params, n)
    if value is DIVERGENT:
        return DIVERGENT
    n = int(n)
    phi, theta = params.phi, params.theta
    fam = params.family
    if fam is ModelFamily.LOG_NORMAL:
        n2 = float(n * n)
        return MomentPartials(
            value=value,
            d_phi=n * value,
            d_theta=n2 * theta * value,
            d_phi2=n2 * value,
            d_theta2=n2 * value * (1.0 + n2 * theta * theta),
            d_phi_theta=n2 * n * theta * value,
        )
    if fam is ModelFamily.WEIBULL:
        u = 1.0 + n / phi
        du = -n / (phi * phi)
        d2u = 2.0 * n / (phi**3)
        psi_u = special.digamma(u)
        g = psi_u * du
        return MomentPartials(
            value=value,
            d_phi=value * g,
            d_theta=n * value / theta,
            d_phi2=value * (g * g + special.trigamma(u) * du * du + psi_u * d2u),
            d_theta2=n * (n - 1) * value / theta**2,
            d_phi_theta=n * value * g / theta,
        )
    # Gamma and inverse-gamma share the Gamma-ratio structure with the
    # argument shifted by +n or -n respectively.
    shifted = phi + n if fam is ModelFamily.GAMMA else phi - n
    psi_diff = special.digamma(shifted) - special.digamma(phi)
    psi1_diff = special.trigamma(shifted) - special.trigamma(phi)
    return MomentPartials(
        value=value,
        d_phi=value * psi_diff,
        d_theta=n * value / theta,
        d_phi2=value * (psi_diff * psi_diff + psi1_diff),
        d_theta2=n * (n - 1) * value / theta**2,
        d_phi_theta=n * value * psi_diff / theta,
    )


def sample(params: ModelParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw i.i.d. values from the family using the supplied generator.

    The inverse-gamma is drawn as theta over a unit-scale gamma variate;
    the reciprocal relationship is exact.
    """
    phi, theta = params.phi, params.theta
    if params.family is ModelFamily.GAMMA:
        return rng.gamma(phi, theta, size)
    if params.family is ModelFamily.INVERSE_GAMMA:
        return theta / rng.standard_gamma(phi, size)
    if params.family is ModelFamily.LOG_NORMAL:
        return rng.lognormal(phi, theta, size)
    return theta * rng.weibull(phi, size)
