"""Exception types for numerical failure modes.

Everything raised on a numerical (as opposed to usage) failure derives from
:class:`NumericalError`, so callers and the CLI can distinguish "you passed
garbage" from "the computation degenerated".
"""

from __future__ import annotations


class NumericalError(Exception):
    """Base class for numerical failures (CLI exit code 2)."""


class TailDegeneracyError(NumericalError):
    """Truncation box carries essentially no probability mass (mass < 1e-300)."""


class SamplerDegeneracyError(NumericalError):
    """Rejection sampler acceptance collapsed and no exact fallback exists."""


class FilterDegeneracyError(NumericalError):
    """Particle filter lost all measurement support for several consecutive steps."""


class DivergenceError(NumericalError):
    """Simulated state trajectory blew up (|x| > 1e12)."""


class DegenerateResidualError(NumericalError):
    """Residual spread collapsed to a point; bounds cannot be estimated."""


class EstimationAborted(NumericalError):
    """EM run aborted; ``trace`` holds the iterations completed so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
