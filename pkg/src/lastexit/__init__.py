"""Last-exit times and miss counts of consistent estimators.

Simulators for the Gaussian limit laws of ``eps^2 N_eps`` and ``eps^2 Q_eps``,
exact pre-limit censuses for streaming estimators, closed-form efficiency
calculators, and sequential confidence planning.
"""

__version__ = "0.1.0"

from .errors import LastExitError  # noqa: E402
from .rng import RngStream  # noqa: E402

__all__ = ["__version__", "LastExitError", "RngStream"]
