"""Exception hierarchy shared across the package."""


class CPSBSError(Exception):
    """Base class for every error raised by this package."""


class DesignError(CPSBSError, ValueError):
    """Invalid input to a sampling design (bad weights, sizes, parameters)."""


class SizeError(DesignError):
    """Requested subset size is larger than the base set (or negative)."""


class DegenerateDesignError(DesignError):
    """Fewer than K items carry positive weight, so no size-K set has mass."""


class ImpossibleConditioningError(DesignError):
    """Conditioning on an item that the design can never include."""


class ContractError(CPSBSError, ValueError):
    """A sequence or model argument violates an operation's precondition."""


class ZeroInclusionError(CPSBSError, ArithmeticError):
    """An inclusion probability needed as a divisor is exactly zero."""


class BudgetExceededError(CPSBSError, RuntimeError):
    """An exhaustive computation would exceed its configured size budget."""


class ConfigError(CPSBSError, ValueError):
    """Invalid experiment configuration."""
