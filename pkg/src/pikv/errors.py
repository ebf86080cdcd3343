"""Exception taxonomy shared by all engine modules."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EngineError):
    """Tensor rank or dimension mismatch."""


class ArgumentError(EngineError):
    """Invalid scalar argument (negative k, bad ratio, unknown strategy)."""


class ConfigError(EngineError):
    """Inconsistent or unsupported model/experiment configuration."""


class InputError(EngineError):
    """Bad runtime input data (token id out of range, empty prompt)."""


class StateError(EngineError):
    """Operation applied to an object in the wrong state."""


class IncompatibleError(EngineError):
    """Artifacts produced under different model fingerprints were mixed."""


class NumericsError(EngineError):
    """A kernel produced or received non-finite values."""


class FormatError(EngineError):
    """Malformed serialized artifact (bad magic, corrupt header, bad CRC)."""


class TruncatedError(FormatError):
    """Serialized artifact ends before its declared payload does."""
