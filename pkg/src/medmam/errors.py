"""Shared exception types."""


class ContractError(ValueError):
    """An input violates an operation's stated precondition."""


class TransportSingularityError(ContractError):
    """The paper-mode transport denominator is numerically singular."""


class DivergenceError(RuntimeError):
    """A non-finite value appeared where finite arithmetic was required."""
