"""Exception hierarchy shared by all smoothlab modules."""


class SmoothlabError(Exception):
    """Base class for all smoothlab errors."""


class DimensionMismatch(SmoothlabError):
    """Matrix or vector dimensions are inconsistent with the model."""


class DegenerateObservationNoise(SmoothlabError):
    """Observation noise covariance fails the uniform positivity floor."""


class UnknownBenchmark(SmoothlabError, KeyError):
    """Requested benchmark name is not in the built-in catalog."""


class NonFiniteState(SmoothlabError):
    """A simulated or filtered state left the finite range (NaN/inf)."""


class SingularNoise(SmoothlabError):
    """Observation noise covariance is numerically singular."""


class SingularCovariance(SmoothlabError):
    """State covariance is numerically singular (condition guard tripped)."""


class EmptyCloud(SmoothlabError):
    """Particle cloud is empty or has no usable weight."""


class NonConstantAlpha(SmoothlabError):
    """KDE score requires a state-independent diffusion matrix."""


class OutOfSupport(SmoothlabError):
    """Query point lies outside the tabulated density support."""


class WeightCollapse(SmoothlabError):
    """All particle weights underflowed in a single update."""


class UnsupportedTestFunction(SmoothlabError):
    """Test function is not a quadratic polynomial."""


class GridMismatch(SmoothlabError):
    """Two objects live on different time or space grids."""


class CflViolation(SmoothlabError):
    """Explicit PDE stepping would need more sub-steps than allowed."""

    def __init__(self, required_substeps: int, max_substeps: int):
        self.required_substeps = required_substeps
        self.max_substeps = max_substeps
        super().__init__(
            f"CFL condition needs {required_substeps} sub-steps per grid step "
            f"(cap {max_substeps})"
        )


class NegativeDensity(SmoothlabError):
    """Tabulated density went below the negativity clamp tolerance."""


class MassUnderflow(SmoothlabError):
    """Density normalizer underflowed to zero."""


class TooFewSamples(SmoothlabError):
    """Not enough samples for an asymptotic moment comparison."""


class ConfigError(SmoothlabError):
    """Experiment configuration is invalid; message names the field."""
