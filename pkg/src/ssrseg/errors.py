"""Exception hierarchy shared by every ssrseg module."""


class SSRError(Exception):
    """Base class for all errors raised by ssrseg."""


class ContractError(SSRError, ValueError):
    """An operation received inputs that violate its shape or value contract."""


class ConfigError(SSRError, ValueError):
    """A configuration value (extent, flag combination, hyperparameter) is invalid."""


class FormatError(SSRError):
    """A container file is malformed.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class OracleError(SSRError):
    """The finite-difference oracle detected a non-deterministic objective."""


class LoadError(SSRError):
    """A checkpoint does not match the model it is being loaded into."""

    def __init__(self, message, missing=(), extra=()):
        parts = [message]
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if extra:
            parts.append("extra: " + ", ".join(extra))
        super().__init__("; ".join(parts))
        self.missing = list(missing)
        self.extra = list(extra)
