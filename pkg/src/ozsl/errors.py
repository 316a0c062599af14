"""Exception taxonomy shared by all ozsl modules."""


class OzslError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(OzslError):
    """Operands have incompatible shapes."""


class DomainError(OzslError):
    """Input outside the mathematical domain of an operation."""


class NonFiniteError(OzslError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(OzslError):
    """An API precondition was violated (e.g., backward on a non-scalar)."""


class ValidationError(OzslError):
    """Malformed file, manifest, dataset, or configuration."""


class TrainingError(OzslError):
    """Training aborted (non-finite loss or gradient)."""


class DegenerateGeometryError(OzslError):
    """Complementary sampling could not escape the known-class regions."""


class FlatTailError(OzslError):
    """Weibull fit attempted on an all-equal (zero-spread) tail."""
