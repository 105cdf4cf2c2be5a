"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside a function's mathematical domain."""


class UnderdeterminedError(ValueError):
    """The input does not constrain the requested quantity (degenerate sample)."""


class InsufficientDataError(ValueError):
    """Too little data to run the requested analysis."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class GeneratorAbort(RuntimeError):
    """Synthetic-data generation gave up (e.g. rejection rate too high)."""


class NegativeDiffusionError(RuntimeError):
    """The diffusion coefficient turned negative during integration.

    Carries the step index and state where it happened so the caller can
    report the offending configuration instead of silently producing NaNs.
    """

    def __init__(self, step: int, state, value: float):
        super().__init__(
            f"diffusion became negative ({value:g}) at step {step}, state {state!r}"
        )
        self.step = step
        self.state = state
        self.value = value
