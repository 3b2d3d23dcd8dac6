"""Exception hierarchy shared across the package."""


class DarcnnError(Exception):
    """Base class for every error raised by darcnn."""


class EmptyMaskError(DarcnnError, ValueError):
    pass


class ConfigError(DarcnnError, ValueError):
    pass


class SizeError(DarcnnError, ValueError):
    pass


class ShapeError(DarcnnError, ValueError):
    pass


class GenerationError(DarcnnError, RuntimeError):
    pass


class GuardError(DarcnnError, PermissionError):
    """Raised when a trainer tries to read target-domain annotations."""


class EmptyBatchError(DarcnnError, ValueError):
    pass


class NumericalError(DarcnnError, FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


class EmptyPseudoLabelError(DarcnnError, RuntimeError):
    pass


class ConsistencyError(DarcnnError, ValueError):
    pass


class FreezeViolationError(DarcnnError, RuntimeError):
    pass


class ModeError(DarcnnError, ValueError):
    pass


class CheckpointError(DarcnnError, RuntimeError):
    pass
