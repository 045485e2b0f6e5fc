"""Exception types shared across the package."""


class PartlensError(Exception):
    """Base class for all partlens errors."""


class ContractError(PartlensError):
    """An argument violated an operation's contract (shape, length, range)."""


class ConfigError(PartlensError):
    """Invalid configuration, or a required artifact is missing."""


class CorruptDataError(PartlensError):
    """A dataset file is missing or fails checksum verification."""


class CheckpointError(PartlensError):
    """Checkpoint is incompatible: bad version, architecture, or digest."""


class DivergenceError(PartlensError):
    """Training produced a non-finite loss term."""


class FreezeViolationError(PartlensError):
    """A network that must stay frozen changed during training."""
