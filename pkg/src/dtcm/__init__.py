"""Short-time Green function expansions for parabolic operators.

The order-m kernel is built by pulling the Taylor terms of a parabolically
rescaled operator through the frozen heat semigroup with finite commutator
series, integrating the time-ordered products over simplices, and applying the
result to a Gaussian.
"""
__version__ = "0.1.0"

from .errors import (  # noqa: F401
    DTCMError,
    DomainError,
    EllipticityError,
    ModelError,
    NilpotencyError,
    NumericalError,
    OrderError,
    ResourceError,
    StructuralError,
)
