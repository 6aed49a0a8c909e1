"""Exception types shared across the kit."""


class SlukitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SlukitError):
    """Tensor shapes are incompatible for the requested operation."""


class ValidationError(SlukitError):
    """A value violates an operation's input contract (bad one-hot, bad mask, ...)."""


class ConfigError(SlukitError):
    """A configuration value is out of range or inconsistent."""


class InputError(SlukitError):
    """User-supplied data (waveform, tokens, manifest entry) is unusable."""


class ContractError(SlukitError):
    """An internal API contract was broken (non-scalar loss, missing gradient, ...)."""


class CheckpointError(SlukitError):
    """A checkpoint file is malformed, corrupt, or incompatible."""


class TransferError(SlukitError):
    """Encoder transfer failed (missing tensors, shape mismatch)."""


class RunLockError(SlukitError):
    """Another training process holds the run-directory lock."""
