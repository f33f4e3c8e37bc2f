"""Exception taxonomy shared by all semilab modules."""


class SemilabError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SemilabError, ValueError):
    """Caller supplied an out-of-range or non-finite value."""


class ContractViolation(SemilabError, ValueError):
    """Structural precondition broken (dimension mismatch, invalid flag)."""


class NumericalError(SemilabError, RuntimeError):
    """A numerical routine failed; the message carries condition diagnostics."""


class BlowUpError(SemilabError, RuntimeError):
    """A simulated path exceeded the divergence guard.

    With a Lipschitz drift true blow-up is impossible, so tripping the guard
    signals a misconfigured model or step size rather than genuine dynamics.
    """

    def __init__(self, message, *, step=None, time=None, max_norm=None):
        super().__init__(message)
        self.step = step
        self.time = time
        self.max_norm = max_norm


class ConfigError(SemilabError, ValueError):
    """Scenario configuration failed to parse or validate.

    ``field`` holds a dotted path into the document (e.g. ``model.A``).
    """

    def __init__(self, message, *, field=""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
