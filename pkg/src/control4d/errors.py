"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented contract (bad config, bad dataset, bad args)."""


class ConfigError(ValidationError):
    """Configuration file is malformed or inconsistent."""


class SchemaError(ValidationError):
    """A serialized artifact (checkpoint, report) does not match the expected schema."""


class EditorTransportError(RuntimeError):
    """The remote editor endpoint failed after retries."""


class EmptyConditionError(ValueError):
    """A condition image could not be extracted (e.g. all-zero depth)."""


class NumericalError(RuntimeError):
    """A non-finite value was produced where finiteness is guaranteed."""
