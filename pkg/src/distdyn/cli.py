"""Command-line front end: fit, rank, langevin, simulate, report.

Each subcommand reads one flat key = value configuration, writes
machine-readable reports into the output directory, and exits 0 on
success, 2 on input errors, 3 on insufficient data, 4 on a generation
abort.  All outputs embed the effective configuration and its hash;
reruns with the same configuration and seed are byte-identical.  Wall
clock timestamps live only in the run.log sidecar.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import models
from . import simulate as sim
from .config import (
    PipelineConfig,
    apply_overrides,
    canonical_lines,
    config_sha256,
    load_config,
)
from .detrend import DailyPattern, decompose, write_decomposition_csv
from .divergence import WeightScheme, rank_report, rank_series, write_rank_csv
from .errors import DomainError, GeneratorAbort, InsufficientDataError
from .fitting import fit_all, read_param_series, write_param_series
from .ingest import assemble_snapshots, load_records, to_records, write_records_csv
from .jsonio import dumps
from .kramers_moyal import (
    autocorrelation_regimes,
    conditional_moments,
    drift_diffusion,
    km_report,
    ou_extract,
    write_band_csv,
)
from .markov import scan_markov_length


def _stamp(config: PipelineConfig) -> dict:
    return {
        "config_sha256": config_sha256(config),
        "seed": config.seed,
        "config": config.as_dict(),
    }


def _prelude(config: PipelineConfig) -> list[str]:
    return [
        f"config_sha256 {config_sha256(config)}",
        f"seed {config.seed}",
        *canonical_lines(config),
    ]


def _write_json(config: PipelineConfig, name: str, payload: dict) -> None:
    document = dict(payload)
    document["run"] = _stamp(config)
    with open(os.path.join(config.out, name), "w", encoding="utf-8") as fh:
        fh.write(dumps(document) + "\n")


def _load_series(config: PipelineConfig):
    if not config.records:
        raise DomainError("no input: set the 'records' config key")
    loaded = load_records(config.records)
    series = assemble_snapshots(
        loaded.records, config.calendar(), min_entities=config.min_entities
    )
    return series, loaded


def cmd_fit(config: PipelineConfig) -> dict:
    """Fit all four families at every snapshot; write the parameter series."""
    series, loaded = _load_series(config)
    params = fit_all(series, min_entities=config.min_entities, threads=config.threads)
    write_param_series(config.params_path(), params, prelude=_prelude(config))
    failure_counts: dict[str, int] = {}
    for cell_errors in params.fit_errors:
        for family in cell_errors:
            failure_counts[family.value] = failure_counts.get(family.value, 0) + 1
    summary = {
        "n_snapshots": len(params.times),
        "malformed_rows": [{"line": e.line, "reason": e.reason} for e in loaded.errors],
        "ingest": series.report.as_dict() if series.report else None,
        "fit_failures": failure_counts,
    }
    _write_json(config, "fit_report.json", summary)
    return summary


def _schemes(config: PipelineConfig) -> list[WeightScheme]:
    if config.scheme == "center":
        return [WeightScheme.center_weighted()]
    if config.scheme == "tail":
        return [WeightScheme.tail_weighted()]
    return [WeightScheme.center_weighted(), WeightScheme.tail_weighted()]


def cmd_rank(config: PipelineConfig) -> dict:
    """Score every fitted snapshot under the configured weight schemes."""
    params = read_param_series(config.params_path())
    series, _ = _load_series(config)
    tables = []
    headline = {}
    for scheme in _schemes(config):
        table = rank_series(series, params, scheme, min_entities=config.min_entities)
        report = rank_report(table)
        _write_json(config, f"rank_{scheme.tag.value}.json", report)
        tables.append(table)
        per_family = report["per_family"]
        best = min(per_family, key=lambda name: per_family[name]["mean"])
        n = len(table.entries)
        headline[scheme.tag.value] = {
            "best_mean_family": best,
            "best_mean": per_family[best]["mean"],
            "rank1_fraction": {
                name: (agg["rank_histogram"][0] / n if n else math.nan)
                for name, agg in per_family.items()
            },
        }
    write_rank_csv(os.path.join(config.out, "ranks.csv"), tables, prelude=_prelude(config))
    summary = {"n_ranked_snapshots": len(tables[0].entries), "schemes": headline}
    _write_json(config, "rank_summary.json", summary)
    return summary


def _stage(name: str, fn, *args, **kwargs):
    """Run one pipeline stage; errors leave carrying the stage name."""
    try:
        return fn(*args, **kwargs)
    except InsufficientDataError as exc:
        raise InsufficientDataError(str(exc), stage=exc.stage or name) from exc
    except DomainError as exc:
        raise DomainError(f"{name}: {exc}") from exc


def cmd_langevin(config: PipelineConfig) -> dict:
    """Detrend the fitted parameter, locate the conditioning lag, and
    extract the mean-reverting law behind the fluctuations."""
    params = read_param_series(config.params_path())
    family = config.model_family()
    values = params.column(family, config.parameter)
    times = np.asarray(params.times, dtype=np.int64)
    keep = np.isfinite(values)
    if not keep.any():
        raise InsufficientDataError(
            f"no usable fits for {family.value}/{config.parameter}", stage="decompose"
        )
    times, values = times[keep], values[keep]
    cal = config.calendar()

    dec = _stage(
        "decompose",
        decompose,
        times,
        values,
        cal,
        window_days=config.window_days,
        parameter_name=config.parameter,
    )
    _write_json(
        config,
        "decompose.json",
        {
            "parameter": dec.parameter_name,
            "family": family.value,
            "n_points": int(dec.times.size),
            "window_days": dec.window_days,
            "slot_minutes": dec.slot_minutes,
            "slot_means": dec.slot_means,
            "polynomial": dec.polynomial.as_dict(),
        },
    )
    write_decomposition_csv(
        os.path.join(config.out, "decompose.csv"), dec, prelude=_prelude(config)
    )
    fluct = dec.fluctuations

    try:
        scan = _stage(
            "markov",
            scan_markov_length,
            dec.times,
            fluct,
            interval_seconds=cal.interval_seconds,
            band=(config.band_low, config.band_high),
            bins=config.markov_bins,
            min_count=config.markov_min_count,
        )
        markov_payload = scan.as_dict()
        scanned_length = scan.markov_length
    except InsufficientDataError as exc:
        # an explicit conditioning lag makes the run independent of the
        # scan outcome, so starvation turns into a recorded diagnostic
        if not config.tau_l:
            raise
        markov_payload = {
            "taus": [],
            "ratios": [],
            "band": [config.band_low, config.band_high],
            "markov_length_minutes": None,
            "skipped_taus": [],
            "starved": str(exc),
        }
        scanned_length = None
    _write_json(config, "markov.json", markov_payload)

    tau_l = config.tau_l or scanned_length
    if tau_l is None:
        raise InsufficientDataError(
            "conditioning lag unresolved by the scan; set tau_l", stage="markov"
        )
    lags = config.lags or tuple(
        range(
            cal.interval_seconds,
            int(config.window_factor * tau_l) + 1,
            cal.interval_seconds,
        )
    )
    moments = _stage(
        "moments",
        conditional_moments,
        dec.times,
        fluct,
        lags,
        bins=config.bins,
        min_count=config.min_count,
    )
    _write_json(
        config,
        "moments.json",
        {
            "lags": list(moments.lags),
            "edges": moments.edges,
            "centers": moments.centers,
            "counts": moments.counts,
            "m1": moments.m1,
            "m2": moments.m2,
            "se1": moments.se1,
            "se2": moments.se2,
            "anchor_mean": moments.anchor_mean,
            "used": list(moments.used),
            "gap_excluded": list(moments.gap_excluded),
            "out_of_range": list(moments.out_of_range),
            "total_pairs": list(moments.total_pairs),
            "min_count": moments.min_count,
        },
    )

    estimate = _stage(
        "drift_diffusion", drift_diffusion, moments, tau_l, window_factor=config.window_factor
    )
    report = km_report(estimate)
    report["tau_l_seconds"] = int(tau_l)
    _write_json(config, "km.json", report)

    ou = _stage("ou_extract", ou_extract, estimate, dec.polynomial)
    _write_json(config, "ou.json", ou.as_dict())
    write_band_csv(os.path.join(config.out, "band.csv"), ou, prelude=_prelude(config))

    max_lag = min(config.autocorr_max_lag, fluct.size // 4)
    if max_lag < 3:
        raise InsufficientDataError(
            "series too short for an autocorrelation study", stage="autocorrelation"
        )
    regimes = _stage(
        "autocorrelation",
        autocorrelation_regimes,
        fluct,
        max_lag,
        float(cal.interval_seconds),
        k_hat=ou.k,
    )
    _write_json(config, "autocorr.json", regimes.as_dict())

    summary = {
        "markov_length_minutes": markov_payload["markov_length_minutes"],
        "tau_l_seconds": int(tau_l),
        "k": ou.k,
        "sigma2": ou.sigma2,
        "stationary_variance": ou.stationary_variance,
        "response_time_seconds": ou.response_time,
        "autocorr_breakpoint_seconds": regimes.breakpoint_seconds,
        "autocorr_tau_short_seconds": regimes.tau_short,
        "autocorr_tau_long_seconds": regimes.tau_long,
        "autocorr_unreliable": regimes.unreliable,
    }
    return summary


def cmd_simulate(config: PipelineConfig) -> dict:
    """Generate a synthetic dataset and check the integrator against the
    closed-form law plus the induced-moment convergence orders."""
    cal = config.calendar()
    phi_pattern = DailyPattern(
        "phi",
        len(config.sim_phi_coeffs) - 1,
        np.asarray(config.sim_phi_coeffs, dtype=float),
        0.0,
        float(cal.session_minutes),
    )
    theta_pattern = DailyPattern(
        "theta",
        len(config.sim_theta_coeffs) - 1,
        np.asarray(config.sim_theta_coeffs, dtype=float),
        0.0,
        float(cal.session_minutes),
    )
    law = sim.OUAnalytic(
        k=config.sim_k, sigma=config.sim_sigma, phi_f=0.0, phi0=config.sim_phi0, t0=0.0
    )
    seed_data, seed_oracle, seed_orders = np.random.SeedSequence(config.seed).spawn(3)

    dataset = sim.generate_synthetic_dataset(
        phi_pattern,
        theta_pattern,
        law,
        config.sim_entities,
        config.sim_days,
        seed_data,
        cal=cal,
        epoch_day0=config.sim_epoch_day0,
        max_rejection_rate=config.sim_max_rejection_rate,
    )
    write_records_csv(
        to_records(dataset.series),
        os.path.join(config.out, "dataset.csv"),
        prelude=_prelude(config),
    )
    _write_truth_csv(config, dataset)
    _write_json(
        config,
        "generation.json",
        {
            "n_snapshots": len(dataset.series.times),
            "n_entities": config.sim_entities,
            "days": config.sim_days,
            "rejections": dataset.rejections,
            "proposals": dataset.proposals,
            "rejection_rate": dataset.rejection_rate,
            "fluctuation_sd": float(dataset.phi_star.std()),
            "stationary_sd": math.sqrt(law.sigma * law.sigma / (2.0 * law.k)),
        },
    )

    dt = 0.01 / config.sim_k
    displaced = sim.OUAnalytic(
        k=config.sim_k,
        sigma=config.sim_sigma,
        phi_f=0.0,
        phi0=3.0 * math.sqrt(config.sim_sigma**2 / (2.0 * config.sim_k)),
        t0=0.0,
    )
    checkpoints = [round(f / config.sim_k / dt) * dt for f in (0.5, 1.0, 2.0, 5.0)]
    oracle = sim.ou_checkpoint_report(displaced, dt, config.sim_paths, checkpoints, seed_oracle)
    _write_json(config, "ou_check.json", oracle)

    orders = _convergence_study(seed_orders)
    _write_json(config, "convergence.json", orders)

    summary = {
        "rejection_rate": dataset.rejection_rate,
        "oracle_max_abs_z": oracle["max_abs_z"],
        "stochastic_ratio": orders["stochastic"]["ratio"],
        "deterministic_ratio": orders["deterministic"]["ratio"],
    }
    return summary


def _write_truth_csv(config: PipelineConfig, dataset) -> None:
    from .jsonio import format_float

    lines = [f"# {text}" for text in _prelude(config)]
    lines.append("time,phi,theta,phi_fluctuation")
    for t, p, q, star in zip(
        dataset.series.times, dataset.phi, dataset.theta, dataset.phi_star
    ):
        lines.append(
            ",".join((str(int(t)), format_float(p), format_float(q), format_float(star)))
        )
    with open(os.path.join(config.out, "truth.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _convergence_study(seed) -> dict:
    """Error ratios under dt halving for the induced moment equation."""

    def spec(dt, child, noise):
        rate, target = 0.05, 0.1
        coupled = sim.CoupledLangevinSpec(
            h1=lambda p, q: -rate * (p - target),
            h2=lambda p, q: 0.0,
            g11=lambda p, q: noise,
            g12=lambda p, q: 0.0,
            g21=lambda p, q: 0.0,
            g22=lambda p, q: 0.0,
            phi0=0.2,
            theta0=0.3,
            dt=dt,
            n_steps=1,
            seed=child,
        )
        return sim.MomentEvolutionSpec(models.ModelFamily.LOG_NORMAL, coupled, 1)

    child_stochastic, child_deterministic = seed.spawn(2)
    out = {}
    for label, noise, n_paths, child, expected in (
        ("stochastic", 0.05, 200, child_stochastic, 0.5),
        ("deterministic", 0.0, 1, child_deterministic, 1.0),
    ):
        coarse = sim.verify_moment_evolution(spec(0.02, child, noise), horizon=4.0, n_paths=n_paths)
        fine = sim.verify_moment_evolution(spec(0.01, child, noise), horizon=4.0, n_paths=n_paths)
        out[label] = {
            "dt_coarse": 0.02,
            "dt_fine": 0.01,
            "error_coarse": coarse["mean_end_error"],
            "error_fine": fine["mean_end_error"],
            "ratio": coarse["mean_end_error"] / fine["mean_end_error"],
            "expected_order": expected,
            "n_paths": n_paths,
        }
    return out


def cmd_report(config: PipelineConfig) -> dict:
    """Full chain on one dataset: fit, rank, dynamics, one summary file."""
    fit_summary = cmd_fit(config)
    rank_summary = cmd_rank(config)
    dynamics_summary = cmd_langevin(config)
    summary = {
        "fit": {
            "n_snapshots": fit_summary["n_snapshots"],
            "fit_failures": fit_summary["fit_failures"],
        },
        "rank": rank_summary["schemes"],
        "dynamics": dynamics_summary,
    }
    _write_json(config, "summary.json", summary)
    return summary


_COMMANDS = {
    "fit": cmd_fit,
    "rank": cmd_rank,
    "langevin": cmd_langevin,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def _unsigned(text: str) -> int:
    value = int(text)
    if value < 0 or value >= 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("threads must be at least 1")
    return value


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="path to a key = value configuration file")
    shared.add_argument("--seed", type=_unsigned, help="override the configured seed")
    shared.add_argument("--out", help="override the configured output directory")
    shared.add_argument("--threads", type=_positive, help="override the configured thread count")
    parser = argparse.ArgumentParser(
        prog="distdyn",
        description="Fit snapshot distributions, rank families, extract parameter dynamics.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("fit", "fit all model families at every snapshot"),
        ("rank", "score the fitted families under the weight schemes"),
        ("langevin", "detrend, scan the conditioning lag, extract the dynamics"),
        ("simulate", "generate synthetic data and run the integrator checks"),
        ("report", "run fit, rank, and langevin, then summarize"),
    ):
        commands.add_parser(name, parents=[shared], help=text)
    return parser


def _log(config: PipelineConfig, message: str) -> None:
    # the one place where wall-clock time is recorded
    stamp = datetime.now(timezone.utc).isoformat()
    with open(os.path.join(config.out, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else PipelineConfig()
        config = apply_overrides(config, seed=args.seed, out=args.out, threads=args.threads)
    except (OSError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(config.out, exist_ok=True)
    try:
        _COMMANDS[args.command](config)
    except InsufficientDataError as exc:
        stage = f" at stage {exc.stage}" if exc.stage else ""
        print(f"insufficient data{stage}: {exc}", file=sys.stderr)
        _log(config, f"{args.command} failed{stage}: {exc}")
        return 3
    except GeneratorAbort as exc:
        print(f"generation aborted: {exc}", file=sys.stderr)
        _log(config, f"{args.command} aborted: {exc}")
        return 4
    except (OSError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _log(config, f"{args.command} failed: {exc}")
        return 2
    _log(config, f"{args.command} ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
