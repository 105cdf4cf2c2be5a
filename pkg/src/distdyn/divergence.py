"""Weighted log-ratio divergence, per-snapshot ranks, aggregates.

The score is sum_i |ln(P_i/Q_i)| F_i ds_i with P the fitted model density
on the empirical support and Q the finite-difference density of the
empirical CDF.  F=P concentrates weight where the data mass sits; F=1/P
amplifies tail mismatches and is by default restricted to support points
strictly above the empirical median.  The absolute value makes the score
a distance-like quantity rather than a true Kullback-Leibler divergence
(which can have cancelling signed contributions); zero still coincides
with pointwise equality on the included points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError
from .fitting import EmpiricalCDF, empirical_cdf
from .models import ModelFamily, pdf

DENSITY_FLOOR = 1e-300


class WeightTag(Enum):
    CENTER_WEIGHTED = "center_weighted"  # F = P
    TAIL_WEIGHTED = "tail_weighted"  # F = 1/P


class TailRestriction(Enum):
    NONE = "none"
    ABOVE_MEDIAN = "above_median"


@dataclass(frozen=True)
class WeightScheme:
    tag: WeightTag
    tail_restriction: TailRestriction

    @classmethod
    def center_weighted(cls) -> "WeightScheme":
        return cls(WeightTag.CENTER_WEIGHTED, TailRestriction.NONE)

    @classmethod
    def tail_weighted(cls) -> "WeightScheme":
        return cls(WeightTag.TAIL_WEIGHTED, TailRestriction.ABOVE_MEDIAN)

    @property
    def label(self) -> str:
        if self.tail_restriction is TailRestriction.NONE:
            return self.tag.value
        return f"{self.tag.value}+{self.tail_restriction.value}"


@dataclass(frozen=True)
class DivergenceDiagnostics:
    included_points: int
    floored_model: int
    floored_empirical: int


def empirical_density(ecdf: EmpiricalCDF) -> np.ndarray:
    """Finite-difference density: Q_i = (probs_i - probs_{i-1}) / ds_i."""
    q = np.empty_like(ecdf.probs)
    q[0] = ecdf.probs[0] / ecdf.widths[0]
    if q.size > 1:
        q[1:] = np.diff(ecdf.probs) / ecdf.widths[1:]
    return q


def _above_median_mask(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Support points strictly above the median of the (q, w) mass.

    The first index whose cumulative mass fraction reaches one half holds
    (or brackets from below) the median value, so strictly-above means
    every later index.  For a density differenced from a sample ECDF this
    reproduces the order-statistic median for even and odd sizes alike;
    the relative threshold keeps the mask invariant under width scaling.
    """
    cum = np.cumsum(q * w)
    total = cum[-1]
    if not (total > 0.0):
        raise DomainError("empirical density carries no mass")
    j = int(np.argmax(cum >= (0.5 - 1e-9) * total))
    mask = np.zeros(q.size, dtype=bool)
    mask[j + 1 :] = True
    return mask


def divergence_with_diagnostics(
    model_pdf_at_support, empirical_density_at_support, widths, scheme: WeightScheme
) -> tuple[float, DivergenceDiagnostics]:
    p = np.asarray(model_pdf_at_support, dtype=float).ravel()
    q = np.asarray(empirical_density_at_support, dtype=float).ravel()
    w = np.asarray(widths, dtype=float).ravel()
    if not (p.size == q.size == w.size):
        raise DomainError("model density, empirical density and widths must have equal length")
    if p.size == 0:
        raise DomainError("empty inputs")
    if np.any(~(w > 0.0)):
        raise DomainError("widths must be positive")
    if np.any(q < 0.0) or np.any(~np.isfinite(q)):
        raise DomainError("empirical density must be finite and nonnegative")
    if np.any(p < 0.0) or np.any(~np.isfinite(p)):
        raise DomainError("model density must be finite and nonnegative")

    if scheme.tail_restriction is TailRestriction.ABOVE_MEDIAN:
        mask = _above_median_mask(q, w)
    else:
        mask = np.ones(p.size, dtype=bool)
    if not mask.any():
        raise DomainError("no support points carry weight under the tail restriction")

    floored_model = int(np.count_nonzero(p[mask] < DENSITY_FLOOR))
    floored_empirical = int(np.count_nonzero(q[mask] < DENSITY_FLOOR))
    pf = np.maximum(p, DENSITY_FLOOR)
    qf = np.maximum(q, DENSITY_FLOOR)

    if scheme.tag is WeightTag.CENTER_WEIGHTED:
        weight = pf
    else:
        weight = 1.0 / pf
    # floored densities of badly mis-specified families make the tail
    # weight saturate; inf is the intended score for those, not an error
    with np.errstate(over="ignore"):
        terms = np.abs(np.log(pf / qf)) * weight * w
        value = float(np.sum(terms[mask]))
    return value, DivergenceDiagnostics(
        included_points=int(mask.sum()),
        floored_model=floored_model,
        floored_empirical=floored_empirical,
    )


def weighted_divergence(model_pdf_at_support, empirical_density_at_support, widths, scheme) -> float:
    value, _ = divergence_with_diagnostics(
        model_pdf_at_support, empirical_density_at_support, widths, scheme
    )
    return value


def assign_ranks(divergences: dict) -> dict:
    """Ascending divergence, ties broken by the fixed family order."""
    order = sorted(ModelFamily, key=lambda f: (divergences[f], f.tie_break_order))
    return {family: position + 1 for position, family in enumerate(order)}


@dataclass(frozen=True)
class RankEntry:
    divergence: float
    rank: int
    diagnostics: DivergenceDiagnostics | None = None


def rank_snapshot(fits: dict, ecdf: EmpiricalCDF, scheme: WeightScheme) -> dict:
    """Score all four families at one snapshot.

    Families whose fit failed or did not converge score +inf and land at
    the bottom of the ranking (rank 4 when unique).
    """
    q = empirical_density(ecdf)
    divergences = {}
    entries = {}
    for family in ModelFamily:
        res = fits.get(family)
        if res is None or not res.converged:
            divergences[family] = math.inf
            entries[family] = (math.inf, None)
            continue
        value, diag = divergence_with_diagnostics(
            pdf(res.params, ecdf.support), q, ecdf.widths, scheme
        )
        divergences[family] = value
        entries[family] = (value, diag)
    ranks = assign_ranks(divergences)
    return {
        family: RankEntry(divergence=entries[family][0], rank=ranks[family], diagnostics=entries[family][1])
        for family in ModelFamily
    }


@dataclass
class RankTable:
    scheme: WeightScheme
    times: list
    entries: list  # one dict[ModelFamily, RankEntry] per time


def rank_series(series, param_series, scheme: WeightScheme, min_entities: int = 10) -> RankTable:
    """Rank every fitted snapshot of a series; pure and order-stable."""
    times = []
    entries = []
    by_time = dict(zip(param_series.times, param_series.fits))
    for i in series.trading_indices():
        t = series.times[i]
        fits = by_time.get(t)
        if fits is None:
            continue
        try:
            e = empirical_cdf(series.snapshots[i], min_entities=min_entities)
        except Exception:
            continue
        if e.support.size < 2:
            continue
        times.append(t)
        entries.append(rank_snapshot(fits, e, scheme))
    return RankTable(scheme=scheme, times=times, entries=entries)


@dataclass(frozen=True)
class FamilyAggregate:
    mean: float
    std: float
    n_scored: int
    n_excluded: int
    rank_histogram: tuple


def aggregate_ranks(table: RankTable) -> dict:
    """Per-family mean and population std of divergence, plus rank counts.

    Non-finite divergences (failed fits) are excluded from the moments
    but still counted in the rank histogram and in n_excluded.
    """
    if not table.entries:
        raise DomainError("empty rank table")
    out = {}
    for family in ModelFamily:
        values = np.array([entry[family].divergence for entry in table.entries])
        finite = values[np.isfinite(values)]
        hist = [0, 0, 0, 0]
        for entry in table.entries:
            hist[entry[family].rank - 1] += 1
        if finite.size:
            mean = float(np.mean(finite))
            # scale before squaring: tail-weighted scores of badly
            # mis-specified families sit near 1e300 and would overflow
            scale = float(np.max(np.abs(finite)))
            if scale > 0.0:
                std = float(scale * np.sqrt(np.mean(((finite - mean) / scale) ** 2)))
            else:
                std = 0.0
        else:
            mean = math.inf
            std = math.nan
        out[family] = FamilyAggregate(
            mean=mean,
            std=std,
            n_scored=int(finite.size),
            n_excluded=int(values.size - finite.size),
            rank_histogram=tuple(hist),
        )
    return out


def rank_report(table: RankTable) -> dict:
    """JSON-ready report: scheme, per-family aggregates, per-snapshot detail."""
    aggregates = aggregate_ranks(table)
    return {
        "scheme": {
            "weight": table.scheme.tag.value,
            "tail_restriction": table.scheme.tail_restriction.value,
        },
        "per_family": {
            family.value: {
                "mean": agg.mean,
                "std": agg.std,
                "n_scored": agg.n_scored,
                "n_excluded": agg.n_excluded,
                "rank_histogram": list(agg.rank_histogram),
            }
            for family, agg in aggregates.items()
        },
        "per_snapshot": [
            {
                "time": int(t),
                "families": {
                    family.value: {
                        "divergence": entry[family].divergence,
                        "rank": entry[family].rank,
                    }
                    for family in ModelFamily
                },
            }
            for t, entry in zip(table.times, table.entries)
        ],
    }


def write_rank_csv(path, tables: list, prelude: list[str] | None = None) -> None:
    """One row per (time, family, scheme) across all given tables."""
    from .jsonio import format_float

    lines = [f"# {text}" for text in (prelude or [])]
    lines.append("time,family,scheme,divergence,rank")
    for table in tables:
        for t, entry in zip(table.times, table.entries):
            for family in ModelFamily:
                lines.append(
                    ",".join(
                        (
                            str(int(t)),
                            family.value,
                            table.scheme.label,
                            format_float(entry[family].divergence),
                            str(entry[family].rank),
                        )
                    )
                )
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
