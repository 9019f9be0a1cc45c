"""Exception types raised by covshift."""

import numpy as np


class CovshiftError(Exception):
    """Base class for all covshift errors."""


class ConfigError(CovshiftError, ValueError):
    """Invalid configuration, parameters, or file schema."""


class AssumptionError(ConfigError):
    """A scenario violates the closeness/boundedness assumptions it was built under."""


class FactorizationError(CovshiftError, np.linalg.LinAlgError):
    """A covariance or Gram matrix could not be factorized even with jitter."""


class SamplingError(CovshiftError, RuntimeError):
    """A sampler could not produce draws (e.g. rejection acceptance collapsed)."""


class BoundedTargetError(CovshiftError, ValueError):
    """Target values violate |f(x)| <= 1."""

    def __init__(self, indices):
        self.indices = list(indices)
        shown = self.indices[:10]
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"|f(x)| > 1 at indices {shown}{more}")
