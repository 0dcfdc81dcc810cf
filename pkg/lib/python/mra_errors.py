"""
Error types for the MRA reconstruction pipeline

Every error raised on purpose by the library derives from MraVaeError. Each
family carries the process exit code the command-line entry point returns
for it:

- usage errors   -> 1
- data errors    -> 2
- numeric errors -> 3
"""

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class MraVaeError(Exception):
    """Base class for all pipeline errors"""
    exit_code = EXIT_DATA

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extra = ", ".join(f"{k}={v!r}" for k, v in self.details.items())
        return f"{self.message} ({extra})"


# Usage

class ConfigError(MraVaeError, ValueError):
    """Bad configuration key or value"""
    exit_code = EXIT_USAGE


# Data

class ShapeMismatchError(MraVaeError, ValueError):
    """Operand shapes do not agree"""


class NiftiError(MraVaeError):
    """Problem reading or writing a NIfTI-1 file"""


class NiftiBadMagicError(NiftiError):
    pass


class NiftiTwoFileError(NiftiError):
    pass


class NiftiUnsupportedDatatypeError(NiftiError):
    pass


class NiftiTruncatedError(NiftiError):
    pass


class NiftiDimensionError(NiftiError):
    pass


class CheckpointError(MraVaeError):
    """Problem reading or writing a model checkpoint"""


class CheckpointBadMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class NormalizationMismatchError(CheckpointError):
    pass


class NormalizationError(MraVaeError, ValueError):
    """Volume cannot be intensity-normalized"""


class ThresholdError(MraVaeError, ValueError):
    """Histogram thresholding is undefined for the input"""


class DegenerateSegmentationError(ThresholdError):
    """Vessel segmentation undefined (constant in-mask intensities)"""


class PatchSamplingError(MraVaeError, ValueError):
    pass


class EmptyMaskError(MraVaeError, ValueError):
    """A metric was asked to average over an empty mask"""


class PhantomGeometryError(MraVaeError, ValueError):
    pass


class PairingError(MraVaeError):
    """Original and reconstructed volumes cannot be matched by id"""


# Numeric

class NonFiniteError(MraVaeError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class NonFiniteGradientError(NonFiniteError):
    pass


class GradCheckFailure(MraVaeError):
    exit_code = EXIT_NUMERIC


class TrainingDivergedError(MraVaeError):
    """Training produced a non-finite loss or gradient; the best parameters so far are kept"""
    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, best_params: Optional[Any] = None, **details: Any):
        super().__init__(message, **details)
        self.best_params = best_params
