"""Exception hierarchy shared by every reverbkit module."""


class ReverbKitError(Exception):
    """Base class for all library errors."""


class ConfigError(ReverbKitError, ValueError):
    """Invalid configuration or parameter combination."""


class FormatError(ReverbKitError, ValueError):
    """Malformed file contents (e.g. a broken RIFF header)."""


class UnsupportedError(ReverbKitError, ValueError):
    """Well-formed input using an encoding we do not handle."""


class IoError(ReverbKitError, OSError):
    """Reading or writing a file failed."""


class RateError(ReverbKitError, ValueError):
    """Sample-rate mismatch between signals, or a non-16 kHz input."""


class LengthError(ReverbKitError, ValueError):
    """Signal too short for the requested processing."""


class ShapeError(ReverbKitError, ValueError):
    """Array dimensions do not match the model."""


class ResourceError(ReverbKitError, RuntimeError):
    """Work would exceed a configured resource cap."""


class DegenerateError(ReverbKitError, ValueError):
    """Input carries no energy, so the quantity is undefined."""


class InsufficientDecayError(ReverbKitError, ValueError):
    """Energy decay curve does not span the dB range a fit requires."""


class SilenceError(ReverbKitError, ValueError):
    """Signal is silent (RMS below the detection threshold)."""


class EstimationError(ReverbKitError, ValueError):
    """Blind estimation found nothing to estimate from."""


class TrainingDivergedError(ReverbKitError, RuntimeError):
    """Training loss became non-finite or exploded."""

    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


class SampleDivergedError(ReverbKitError, RuntimeError):
    """ODE integration produced a non-finite state."""
