"""Exception hierarchy shared by the library and the CLI."""


class ChaoskitError(Exception):
    """Base class for all library errors."""


class InvalidInputError(ChaoskitError, ValueError):
    """An argument violates an operation's precondition."""


class ResourceLimitError(ChaoskitError):
    """A requested computation exceeds the configured cost ceiling."""


class DivergenceError(ChaoskitError):
    """The time stepper produced a non-finite state."""

    def __init__(self, message, particle=None, step=None, context=None):
        super().__init__(message)
        self.particle = particle
        self.step = step
        self.context = dict(context or {})

    def __str__(self):
        base = super().__str__()
        if self.context:
            extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
            return f"{base} ({extra})"
        return base


class ConfigError(ChaoskitError, ValueError):
    """A configuration document is malformed or violates a constraint."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
