"""Markov-property diagnostics for detrended parameter series.

A process is treated as Markov at lag tau when conditioning on one
additional past value changes nothing: p(x1 | x2) = p(x1 | x2, x3).  The
comparison runs over value triples at ages (0, tau, 2*tau), with the
oldest value pinned near zero, and is quantified per conditioning bin by
the Wilcoxon rank-sum statistic of the double-conditioned sample inside
the pooled one.  Per-bin deviations from the null expectation are pooled
by absolute value: shifts in the double-conditioned densities flip sign
with the conditioning value, so signed pooling would cancel exactly the
violations this test exists to detect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InsufficientDataError

DEFAULT_BAND = (0.9, 1.1)
DEFAULT_MIN_COUNT = 50
DEFAULT_BINS = 20
DEFAULT_HALF_WIDTH_FACTOR = 0.1


def _as_series(times, values):
    t = np.asarray(times, dtype=np.int64)
    v = np.asarray(values, dtype=float)
    if t.size != v.size:
        raise DomainError("times and values must have equal length")
    if t.size and np.any(np.diff(t) <= 0):
        raise DomainError("times must be strictly increasing")
    keep = np.isfinite(v)
    return t[keep], v[keep]


def _match_offset(t: np.ndarray, anchors: np.ndarray, offset: int):
    """Indices of samples exactly `offset` seconds after each anchor time.

    Returns (positions, found): positions into t, and a boolean mask of
    anchors that have a sample at the exact offset.  Offsets that fall
    into calendar gaps (overnight, dropped days) simply find no match.
    """
    target = t[anchors] + offset
    pos = np.searchsorted(t, target)
    pos_clipped = np.minimum(pos, t.size - 1)
    found = t[pos_clipped] == target
    return pos_clipped, found


def triples_at_ages(times, values, age1: int, age2: int, age3: int):
    """Value triples (x1, x2, x3) at ages age1 < age2 < age3 seconds.

    x3 is the oldest sample; each triple requires samples at the exact
    three time offsets, so spacings that cross data gaps self-exclude.
    """
    if not (0 <= age1 < age2 < age3):
        raise DomainError("ages must satisfy 0 <= age1 < age2 < age3")
    t, v = _as_series(times, values)
    if t.size < 3:
        raise InsufficientDataError("series too short for triples", stage="markov")
    anchors = np.arange(t.size)  # anchor at the oldest sample
    p2, ok2 = _match_offset(t, anchors, age3 - age2)
    p1, ok1 = _match_offset(t, anchors, age3 - age1)
    ok = ok1 & ok2
    return v[p1[ok]], v[p2[ok]], v[anchors[ok]]


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    sx = x[order]
    new_group = np.r_[True, sx[1:] != sx[:-1]]
    gid = np.cumsum(new_group) - 1
    counts = np.bincount(gid)
    first_rank = np.concatenate(([0], np.cumsum(counts)[:-1])) + 1.0
    group_avg = first_rank + (counts - 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = group_avg[gid]
    return ranks


def rank_sum_and_null(sample_a, sample_b) -> tuple[float, float]:
    """Rank sum of sample_b inside the pooled sample, and its null mean."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise DomainError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    ranks = average_ranks(pooled)
    w = float(ranks[a.size :].sum())
    e0 = b.size * (a.size + b.size + 1) / 2.0
    return w, e0


def pooled_rank_ratio(pairs) -> float:
    """(sum E0 + sum |W - E0|) / sum E0 over conditioning-bin pairs."""
    total_null = 0.0
    total_dev = 0.0
    n = 0
    for sample_a, sample_b in pairs:
        w, e0 = rank_sum_and_null(sample_a, sample_b)
        total_null += e0
        total_dev += abs(w - e0)
        n += 1
    if n == 0 or total_null == 0.0:
        raise InsufficientDataError("no conditioning bins to pool", stage="markov")
    return (total_null + total_dev) / total_null


@dataclass(frozen=True)
class ConditionalDensityPair:
    tau1: int
    tau2: int
    tau3: int
    edges: np.ndarray
    single: np.ndarray  # [conditioning bin, x1 bin]
    double: np.ndarray
    single_counts: np.ndarray
    double_counts: np.ndarray
    half_width: float
    min_count: int

    @property
    def populated_single(self) -> np.ndarray:
        return self.single_counts >= self.min_count

    @property
    def populated_double(self) -> np.ndarray:
        return self.double_counts >= self.min_count


def _conditioned_sets(times, values, tau, tau3, bins, half_width, min_count):
    t, v = _as_series(times, values)
    if v.size == 0:
        raise InsufficientDataError("empty series", stage="markov")
    mean = float(v.mean())
    std = float(v.std())
    if std == 0.0:
        raise InsufficientDataError("constant series has no conditioning range", stage="markov")
    if half_width is None:
        half_width = DEFAULT_HALF_WIDTH_FACTOR * std
    edges = np.linspace(mean - 3.0 * std, mean + 3.0 * std, bins + 1)
    x1, x2, x3 = triples_at_ages(t, v, 0, tau, tau3)
    near_zero = np.abs(x3) <= half_width
    if not near_zero.any():
        raise InsufficientDataError(
            "no samples in the oldest-value slice near zero", stage="markov"
        )
    in_grid = (x1 >= edges[0]) & (x1 <= edges[-1]) & (x2 >= edges[0]) & (x2 <= edges[-1])
    x1, x2, near_zero = x1[in_grid], x2[in_grid], near_zero[in_grid]
    bin_of = np.clip(np.searchsorted(edges, x2, side="right") - 1, 0, bins - 1)
    return x1, bin_of, near_zero, edges, half_width


def conditional_densities(
    times,
    values,
    tau1: int,
    tau2: int,
    tau3: int,
    bins: int = DEFAULT_BINS,
    half_width: float | None = None,
    min_count: int = DEFAULT_MIN_COUNT,
) -> ConditionalDensityPair:
    """Histogram estimates of p(x1|x2) and p(x1|x2, x3 ~ 0) on one grid.

    Both estimates are built from the same triple base so that they are
    comparable sample for sample; conditioning bins below min_count are
    left as nan rows.
    """
    if bins < 10:
        raise DomainError("need at least 10 bins")
    if not (0 <= tau1 < tau2 < tau3):
        raise DomainError("lags must satisfy 0 <= tau1 < tau2 < tau3")
    # ages are relative: only the spacings enter the triple selection
    x1, bin_of, near_zero, edges, hw = _conditioned_sets(
        times, values, tau2 - tau1, tau3 - tau1, bins, half_width, min_count
    )
    widths = np.diff(edges)
    single = np.full((bins, bins), np.nan)
    double = np.full((bins, bins), np.nan)
    single_counts = np.zeros(bins, dtype=np.int64)
    double_counts = np.zeros(bins, dtype=np.int64)
    for b in range(bins):
        sel = bin_of == b
        sample_a = x1[sel]
        sample_b = x1[sel & near_zero]
        single_counts[b] = sample_a.size
        double_counts[b] = sample_b.size
        if sample_a.size >= min_count:
            hist, _ = np.histogram(sample_a, bins=edges)
            single[b] = hist / (sample_a.size * widths)
        if sample_b.size >= min_count:
            hist, _ = np.histogram(sample_b, bins=edges)
            double[b] = hist / (sample_b.size * widths)
    if not (double_counts >= min_count).any():
        raise InsufficientDataError(
            "no conditioning bin reaches min_count in the near-zero slice", stage="markov"
        )
    return ConditionalDensityPair(
        tau1=tau1,
        tau2=tau2,
        tau3=tau3,
        edges=edges,
        single=single,
        double=double,
        single_counts=single_counts,
        double_counts=double_counts,
        half_width=hw,
        min_count=min_count,
    )


def wilcoxon_ratio(
    times,
    values,
    tau: int,
    bins: int = DEFAULT_BINS,
    half_width: float | None = None,
    min_count: int = DEFAULT_MIN_COUNT,
) -> float:
    """Pooled rank-sum ratio t/t0 at ages (0, tau, 2 tau); 1 is Markov."""
    x1, bin_of, near_zero, _, _ = _conditioned_sets(
        times, values, tau, 2 * tau, bins, half_width, min_count
    )
    pairs = []
    for b in range(bins):
        sel = bin_of == b
        sample_b = x1[sel & near_zero]
        if sample_b.size < min_count:
            continue
        # the single-conditioned sample contains the near-zero one,
        # so it passes min_count whenever the stricter set does
        pairs.append((x1[sel], sample_b))
    if not pairs:
        raise InsufficientDataError(
            "no conditioning bin reaches min_count in the near-zero slice", stage="markov"
        )
    return pooled_rank_ratio(pairs)


@dataclass(frozen=True)
class MarkovScan:
    taus: tuple
    ratios: tuple
    band: tuple
    markov_length: int | None  # seconds; None when unresolved
    skipped: tuple = ()  # lags with too little data to score

    @property
    def unresolved(self) -> bool:
        return self.markov_length is None

    def as_dict(self) -> dict:
        return {
            "taus": list(self.taus),
            "ratios": list(self.ratios),
            "band": list(self.band),
            "markov_length_minutes": (
                None if self.markov_length is None else self.markov_length / 60.0
            ),
            "skipped_taus": list(self.skipped),
        }


def scan_markov_length(
    times,
    values,
    taus=None,
    interval_seconds: int = 600,
    band: tuple = DEFAULT_BAND,
    bins: int = DEFAULT_BINS,
    half_width: float | None = None,
    min_count: int = DEFAULT_MIN_COUNT,
) -> MarkovScan:
    """Wilcoxon ratio at each lag; the Markov length is the smallest lag
    from which every tested ratio stays inside the band."""
    if taus is None:
        taus = [interval_seconds * j for j in range(1, 25)]
    taus = [int(t) for t in taus]
    if len(taus) < 3:
        raise DomainError("need at least 3 lags to scan")
    if sorted(taus) != taus:
        raise DomainError("lags must be ascending")
    ratios = []
    kept = []
    skipped = []
    for tau in taus:
        try:
            ratios.append(
                wilcoxon_ratio(
                    times, values, tau, bins=bins, half_width=half_width, min_count=min_count
                )
            )
            kept.append(tau)
        except InsufficientDataError:
            skipped.append(tau)
    if not kept:
        raise InsufficientDataError("no lag had enough conditioned samples", stage="markov")
    in_band = [band[0] <= r <= band[1] for r in ratios]
    markov_length = None
    for j in range(len(kept)):
        if all(in_band[j:]):
            markov_length = kept[j]
            break
    return MarkovScan(
        taus=tuple(kept),
        ratios=tuple(ratios),
        band=tuple(band),
        markov_length=markov_length,
        skipped=tuple(skipped),
    )


def write_density_csv(path, pair: ConditionalDensityPair, prelude: list[str] | None = None) -> None:
    """Long-form grid export: one row per (conditioning bin, x1 bin)."""
    from .jsonio import format_float

    centers = 0.5 * (pair.edges[:-1] + pair.edges[1:])
    lines = [f"# {text}" for text in (prelude or [])]
    lines.append("x2_center,x1_center,single_conditioned,double_conditioned")
    for b, x2c in enumerate(centers):
        for j, x1c in enumerate(centers):
            lines.append(
                ",".join(
                    (
                        format_float(float(x2c)),
                        format_float(float(x1c)),
                        format_float(float(pair.single[b, j])),
                        format_float(float(pair.double[b, j])),
                    )
                )
            )
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
