"""Exception types shared across the package.

The CLI maps these onto exit codes, so every error a user can trigger
belongs to one of the families below.
"""


class TscError(Exception):
    """Base class for all package errors."""


# --- input / configuration -------------------------------------------------


class ParseError(TscError, ValueError):
    pass


class TopologyError(TscError, ValueError):
    pass


class RouteError(TscError, ValueError):
    pass


class InvalidPhase(TscError, ValueError):
    pass


class InvalidOrder(TscError, ValueError):
    pass


class TemplateError(TscError, ValueError):
    pass


class ShapeError(TscError, ValueError):
    pass


class EmptySequence(TscError, ValueError):
    pass


class MissingLogProbs(TscError, ValueError):
    pass


class NoVehicles(TscError, ValueError):
    pass


class ConfigError(TscError, ValueError):
    pass


# --- runtime ---------------------------------------------------------------


class NotSwitchTime(TscError, RuntimeError):
    pass


class BackendError(TscError, RuntimeError):
    pass


class AuthError(BackendError):
    pass


class DivergenceError(TscError, RuntimeError):
    pass


class ControllerError(TscError, RuntimeError):
    pass
