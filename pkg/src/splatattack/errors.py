"""Exception hierarchy shared across the package."""


class SplatAttackError(Exception):
    """Base class for every error raised by splatattack."""


class ConfigError(SplatAttackError, ValueError):
    pass


class NumericInputError(SplatAttackError, ValueError):
    pass


class DegenerateRotationError(SplatAttackError, ValueError):
    pass


class SchemaError(SplatAttackError, ValueError):
    pass


class CorruptFileError(SplatAttackError, ValueError):
    pass


class BoundsError(SplatAttackError, IndexError):
    pass


class ValidationError(SplatAttackError, ValueError):
    pass


class ContractError(SplatAttackError, ValueError):
    """Shapes or sizes passed between components disagree."""


class CoverageError(SplatAttackError, ValueError):
    pass


class CapabilityError(SplatAttackError, TypeError):
    """The victim model cannot do what was asked of it (e.g. no gradients)."""


class ModelInvalidError(SplatAttackError, ValueError):
    pass


class UnavailableError(SplatAttackError, TimeoutError):
    pass


class ProtocolError(SplatAttackError, ValueError):
    pass
