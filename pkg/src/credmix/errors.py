"""Exception types shared across the package."""


class CredmixError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CredmixError, ValueError):
    """Shapes, sizes, or settings that cannot work together."""


class InputError(CredmixError, ValueError):
    """Malformed user data (labels, lengths, files)."""


class UsageError(CredmixError, RuntimeError):
    """An API called out of order."""


class EvaluationError(CredmixError, ArithmeticError):
    """A non-finite value where a finite one is required."""


class ProviderError(CredmixError, RuntimeError):
    """An embedding provider failed after its retry budget."""


class ContractError(CredmixError, ValueError):
    """A component returned data violating its declared contract."""


class IntegrityError(CredmixError, ValueError):
    """A persisted artifact is truncated, corrupt, or from another format version."""


class BudgetError(CredmixError, ValueError):
    """A request exceeds a hard computational budget."""
