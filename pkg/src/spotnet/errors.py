"""Exception hierarchy shared across the package."""


class SpotnetError(Exception):
    """Base class for all errors raised by spotnet."""


class ExprError(SpotnetError):
    """Malformed or ill-typed expression."""


class ParseError(ExprError):
    """Syntax error, carries the offset into the source text."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at offset {pos})")
        self.pos = pos


class NetError(SpotnetError):
    """Ill-formed net, marking or firing."""


class SpatialError(SpotnetError):
    """Invalid road network query."""


class SimError(SpotnetError):
    """Simulation failure."""


class DeadspotError(SpotnetError):
    """Invalid dead-spot scenario parameters or trace."""


class FormulaError(SpotnetError):
    """Malformed or unsupported logic formula."""


class ConfigError(SpotnetError):
    """Bad command line or scenario configuration."""
