class SDFlowError(Exception):
    """Base class for every error raised by the SDFlow lab."""


class DimensionError(SDFlowError, ValueError):
    """Shapes of the operands are incompatible."""


class ParameterError(SDFlowError, ValueError):
    """A scalar parameter lies outside its admissible range."""


class ConfigurationError(SDFlowError, ValueError):
    """The configuration is inconsistent or unusable."""


class DataError(SDFlowError, ValueError):
    """Input data is malformed, non-finite or out of range."""


class ContractError(SDFlowError, RuntimeError):
    """The autodiff engine or optimizer was used outside its contract."""


class CheckpointError(SDFlowError, IOError):
    """A checkpoint file could not be read back faithfully."""


class DivergenceError(SDFlowError, RuntimeError):
    """Training produced a non-finite loss."""
