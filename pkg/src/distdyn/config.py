"""Run configuration: one flat key = value document shared by all subcommands.

Every run embeds its effective configuration (defaults, file, command-line
overrides merged) plus that configuration's hash in each output file, so
any report can be traced to the exact settings that produced it.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

from .errors import DomainError
from .ingest import TradingCalendar
from .models import ModelFamily

_SCHEMES = ("center", "tail", "both")
_PARAMETERS = ("phi", "theta")
# tuple-valued keys holding integers; every other tuple key holds floats
_INT_TUPLES = ("lags",)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs, serializable as flat key = value lines."""

    # input and output plumbing
    records: str = ""  # raw observation CSV (fit, rank, report)
    params: str = ""  # fitted-parameter CSV; empty means <out>/params.csv
    out: str = "out"
    seed: int = 0
    threads: int = 1
    # trading calendar
    session_open_minute: int = 540
    session_intervals: int = 39
    interval_minutes: int = 10
    # daily-pattern estimation
    window_days: int = 20
    # state binning for conditional statistics
    bins: int = 20
    min_count: int = 100
    min_entities: int = 10
    # lag menu for conditional moments, in seconds; empty derives the menu
    # from the conditioning lag and window factor
    lags: tuple = ()
    # acceptance band for the conditional-independence ratio
    band_low: float = 0.9
    band_high: float = 1.1
    # conditioning grid for the Markov scan; the double-conditioned slice
    # keeps only a few percent of the triples, so short series need
    # coarser settings than these defaults (or an explicit tau_l)
    markov_bins: int = 20
    markov_min_count: int = 50
    # divergence weighting for ranking: center, tail, or both
    scheme: str = "both"
    # which fitted parameter drives the dynamics extraction
    family: str = "inverse_gamma"
    parameter: str = "phi"
    # conditioning lag override in seconds; 0 takes the scanned value
    tau_l: int = 0
    window_factor: float = 3.0
    # autocorrelation study depth, in sampling intervals
    autocorr_max_lag: int = 120
    # synthetic generation
    sim_entities: int = 2000
    sim_days: int = 60
    sim_k: float = 2.02e-4
    sim_sigma: float = 1.34e-4
    sim_phi0: float = 0.0
    sim_phi_coeffs: tuple = (1.55e-9, -7.97e-7, 1.33e-4, 9.72e-1)
    sim_theta_coeffs: tuple = (6.97e1, -2.77e4, 4.45e6)
    sim_epoch_day0: int = 0
    sim_max_rejection_rate: float = 0.10
    sim_paths: int = 10000

    def __post_init__(self):
        for name in (
            "threads",
            "session_intervals",
            "interval_minutes",
            "window_days",
            "bins",
            "min_count",
            "min_entities",
            "markov_bins",
            "markov_min_count",
            "autocorr_max_lag",
            "sim_entities",
            "sim_days",
            "sim_paths",
        ):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be at least 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise DomainError("seed must fit in an unsigned 64-bit integer")
        if self.session_open_minute < 0:
            raise DomainError("session_open_minute must be nonnegative")
        if self.tau_l < 0:
            raise DomainError("tau_l must be nonnegative")
        if not self.band_low < self.band_high:
            raise DomainError("band_low must be below band_high")
        if self.scheme not in _SCHEMES:
            raise DomainError(f"scheme must be one of {', '.join(_SCHEMES)}")
        if self.parameter not in _PARAMETERS:
            raise DomainError(f"parameter must be one of {', '.join(_PARAMETERS)}")
        try:
            ModelFamily(self.family)
        except ValueError:
            raise DomainError(f"unknown model family: {self.family!r}") from None
        if self.window_factor <= 1.0:
            raise DomainError("window_factor must exceed 1")
        if not 0.0 <= self.sim_max_rejection_rate <= 1.0:
            raise DomainError("sim_max_rejection_rate must lie in [0, 1]")
        if len(self.sim_phi_coeffs) < 1 or len(self.sim_theta_coeffs) < 1:
            raise DomainError("pattern coefficient lists must not be empty")

    def calendar(self) -> TradingCalendar:
        return TradingCalendar(
            session_open_minute=self.session_open_minute,
            session_length_intervals=self.session_intervals,
            interval_minutes=self.interval_minutes,
        )

    def params_path(self) -> str:
        return self.params or os.path.join(self.out, "params.csv")

    def model_family(self) -> ModelFamily:
        return ModelFamily(self.family)

    def as_dict(self) -> dict:
        """Embeddable form; excludes threads like the canonical lines do."""
        return {
            f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
            for f in fields(PipelineConfig)
            if f.name != "threads"
        }


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        # repr is the shortest text that parses back to the same double,
        # so the canonical form stays exact without trailing digit noise
        return repr(value)
    return str(value)


def canonical_lines(config: PipelineConfig) -> list[str]:
    """The effective configuration as sorted key = value lines.

    The thread count is an execution-resource knob with no bearing on the
    numbers a run produces, so it stays out of the canonical form: reports
    from runs that differ only in thread count must be byte-identical,
    embedded configuration included.
    """
    return [
        f"{f.name} = {_format_value(getattr(config, f.name))}"
        for f in sorted(fields(PipelineConfig), key=lambda f: f.name)
        if f.name != "threads"
    ]


def config_sha256(config: PipelineConfig) -> str:
    text = "\n".join(canonical_lines(config)) + "\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coerce(name: str, text: str, kind: type):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            if not text:
                return ()
            elem = int if name in _INT_TUPLES else float
            return tuple(elem(part.strip()) for part in text.split(","))
    except ValueError:
        raise DomainError(f"config key {name!r}: cannot parse {text!r}") from None
    return text


def config_from_mapping(data: dict) -> PipelineConfig:
    known = {f.name: type(f.default) for f in fields(PipelineConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise DomainError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, value, known[key])
    return PipelineConfig(**kwargs)


def parse_config(text: str) -> PipelineConfig:
    """Parse key = value lines; '#' comments and blank lines are ignored."""
    data: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DomainError(f"config line {number} is not 'key = value': {raw!r}")
        key = key.strip()
        if key in data:
            raise DomainError(f"duplicate config key {key!r} on line {number}")
        data[key] = value.strip()
    return config_from_mapping(data)


def load_config(path) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_overrides(config: PipelineConfig, seed=None, out=None, threads=None) -> PipelineConfig:
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out"] = out
    if threads is not None:
        updates["threads"] = threads
    return replace(config, **updates) if updates else config
