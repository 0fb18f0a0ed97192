"""Exception hierarchy for the estimation toolkit.

Numerical failure modes are named so callers (and the CLI exit-code map)
can distinguish configuration problems from genuine numerical breakdown.
"""


class McontrastError(Exception):
    """Base class for all toolkit errors."""


# -- model / validation ----------------------------------------------------

class EvaluationFailure(McontrastError):
    """A model coefficient returned a non-finite value at a probe point."""


class CenteringViolation(McontrastError):
    """The fast average of b is not zero; the homogenization-regime
    estimator formulas are invalid for this model."""


class ConfigError(McontrastError):
    """Invalid or inconsistent experiment configuration."""


# -- fast-process averaging -------------------------------------------------

class NormalizationFailure(McontrastError):
    """The stationary density carries essentially no mass on the
    truncated domain."""


class NonErgodic(McontrastError):
    """The stationary density grows toward the domain boundary; the
    frozen fast process does not look ergodic on this domain."""


class SolvabilityViolation(McontrastError):
    """The cell-problem right-hand side has a nonzero stationary average,
    so the Poisson equation has no centered solution."""


class ResidualTooLarge(McontrastError):
    """The computed cell solution does not satisfy its equation to
    tolerance."""


class GradientInconsistency(McontrastError):
    """Finite-difference gradients at two step sizes disagree."""


# -- simulation --------------------------------------------------------------

class BlowUp(McontrastError):
    """A simulated trajectory exceeded the magnitude guard; the step size
    is too coarse or the dynamics are not recurrent."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DivisibilityError(McontrastError):
    """Requested observation count does not divide the fine-grid step
    count."""


# -- flow / deterministic machinery ------------------------------------------

class GridMismatch(McontrastError):
    """A requested time does not lie on the flow grid, or an observation
    set does not match the flow it is being combined with."""


class NonFinite(McontrastError):
    """An ODE solution left the finite range inside the horizon."""


class WeightDegenerate(McontrastError):
    """A covariance weight matrix has a numerically zero eigenvalue."""


# -- estimation / variance ----------------------------------------------------

class IdentifiabilityFailure(McontrastError):
    """The information matrix is singular: the parameter is not
    identifiable from the averaged drift along this trajectory."""


class NoDescent(McontrastError):
    """The optimizer could not improve on any starting point; the
    contrast is flat or degenerate."""


class TooManyFailures(McontrastError):
    """More than the tolerated fraction of Monte Carlo replicates failed."""
