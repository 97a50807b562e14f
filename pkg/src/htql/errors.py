"""Exception hierarchy.

``DomainRefusal`` subclasses mark inputs that are well formed but outside the
regime where the asymptotic engine (or simulator) gives an answer; the CLI
maps them to exit code 3. Everything else that signals bad input derives
from ``ValueError``.
"""
from __future__ import annotations


class HTQLError(Exception):
    """Base class for library errors."""


class DomainRefusal(HTQLError):
    """Input is valid but the requested computation is refused."""


class UnstableSystem(DomainRefusal):
    pass


class LightRegime(DomainRefusal):
    pass


class CriticalCase(DomainRefusal):
    pass


class InfeasibleMix(DomainRefusal):
    pass


class UnstableSim(DomainRefusal):
    pass


class RateOrder(HTQLError, ValueError):
    pass


class BadPartition(HTQLError, ValueError):
    pass


class TooManyFlows(HTQLError, ValueError):
    pass


class OutOfDomain(HTQLError, ValueError):
    pass


class ConfigError(HTQLError, ValueError):
    pass
