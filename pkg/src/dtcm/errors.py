"""Exception hierarchy shared by every module."""


class DTCMError(Exception):
    """Base class for all errors raised by the package."""


class StructuralError(DTCMError, ValueError):
    """Operands do not fit together (alphabet mismatch, leftover variables)."""


class NilpotencyError(DTCMError, ArithmeticError):
    """The adjoint series of a non constant-coefficient operator did not terminate."""


class ResourceError(DTCMError, MemoryError):
    """A symbolic object grew past the configured term cap."""


class DomainError(DTCMError, ValueError):
    """An argument lies outside the domain of an operation (t <= t0, tau <= 0, ...)."""


class EllipticityError(DomainError):
    """The diffusion matrix is not uniformly positive definite where it was sampled."""


class OrderError(DTCMError, ValueError):
    """Requested expansion order exceeds what is available or configured."""


class ModelError(DTCMError, ValueError):
    """A coefficient model could not be built from the given parameters or document."""


class NumericalError(DTCMError, ArithmeticError):
    """Non-finite values or a solver breakdown during a numerical computation."""
