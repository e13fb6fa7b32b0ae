"""Exception hierarchy shared across the package."""


class FastWeightsError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FastWeightsError, ValueError):
    pass


class RankError(FastWeightsError, ValueError):
    pass


class ContractError(FastWeightsError, ValueError):
    """A caller violated an operation's precondition."""


class DegenerateKeyError(FastWeightsError, ValueError):
    pass


class ConfigurationError(FastWeightsError, ValueError):
    pass


class ProtocolError(FastWeightsError, RuntimeError):
    """Episode phases were invoked out of order."""


class LabelError(FastWeightsError, ValueError):
    pass


class InputError(FastWeightsError, ValueError):
    pass


class SamplingError(FastWeightsError, ValueError):
    pass


class CapacityError(FastWeightsError, ValueError):
    pass


class GenerationError(FastWeightsError, RuntimeError):
    pass


class IngestionError(FastWeightsError, OSError):
    pass


class DivergenceError(FastWeightsError, FloatingPointError):
    def __init__(self, message, episode=None, seed=None):
        super().__init__(f"{message} (episode={episode}, seed={seed})")
        self.episode = episode
        self.seed = seed


class IntegrityError(FastWeightsError, ValueError):
    """A checkpoint or dataset file failed its header/format checks."""


class ConfigError(FastWeightsError, ValueError):
    """Malformed run configuration; ``key`` names the offending path."""

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
