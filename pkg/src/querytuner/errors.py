"""Exception types shared across the package.

The CLI maps each class to a distinct exit code, so keep the taxonomy flat.
"""


class ShapeError(ValueError):
    """Matrix dimensions incompatible with the requested operation."""


class DomainError(ValueError):
    """Numeric input outside the domain of an elementwise function."""


class UsageError(ValueError):
    """An API precondition was violated by the caller."""


class FeaturizationError(ValueError):
    """A plan references an id missing from the feature vocabulary."""


class KnobValidationError(ValueError):
    """A raw knob value falls outside its declared domain."""


class ScenarioError(ValueError):
    """A scenario or knob-space file failed schema validation.

    The message names the offending field path.
    """


class ConfigError(ValueError):
    """A session configuration file is missing, malformed, or inconsistent."""


class EngineError(RuntimeError):
    """The execution engine failed outside the modelled failure rules."""
