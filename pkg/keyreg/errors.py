"""Exception hierarchy for keyreg."""


class KeyregError(Exception):
    """Base class for all keyreg errors."""


# Geometry / image core

class GeometryError(KeyregError):
    """Invalid geometric input."""


class DegeneratePoint(GeometryError):
    """A point maps to infinity under a projective transform."""


class SingularTransform(GeometryError):
    """A transform cannot be inverted."""


class ChannelMismatch(KeyregError):
    """Image has the wrong number of channels for the operation."""


# Detection

class DetectionError(KeyregError):
    """Keypoint detection failed."""


class EmptyImage(DetectionError):
    """Image has no pixels."""


class NonGrayInput(DetectionError):
    """Detector expects a single-channel image."""


class ImageTooSmall(DetectionError):
    """Image is below the minimum size of the operation."""


class EmptyRoi(DetectionError):
    """Region of interest has no pixels."""


class TargetUnreachable(DetectionError):
    """Keypoint budget cannot be reached even with all thresholds removed."""


class EmptyMask(DetectionError):
    """Vessel mask has no foreground pixels."""


class BadThresholds(DetectionError):
    """Hysteresis thresholds are not ordered lo < hi."""


# Description

class DescriptorError(KeyregError):
    """Descriptor computation failed."""


class OutOfBounds(DescriptorError):
    """Keypoint lies outside the descriptor map."""


class RoiTooSmall(DescriptorError):
    """Region of interest holds fewer pixels than requested samples."""


class NoPositives(DescriptorError):
    """No anchor has a positive partner."""


class NoNegatives(DescriptorError):
    """No anchor has a negative partner."""


class NonUnitNorm(DescriptorError):
    """Descriptors passed to the loss are not L2-normalised."""


class DivergedLoss(DescriptorError):
    """Training loss became NaN or infinite.

    Attributes:
        last_good_state: parameter state dict from the last finite step
        epoch: epoch at which divergence happened
    """

    def __init__(self, message: str, last_good_state=None, epoch: int = -1):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.epoch = epoch


class PatchOutOfBounds(DescriptorError):
    """Patch around a keypoint is not fully inside the image."""


class CheckpointError(DescriptorError):
    """Checkpoint file is malformed or corrupt."""


# Registration

class RegistrationError(KeyregError):
    """Registration failed."""


class EmptyDescriptorSet(RegistrationError):
    """One side of a match has no descriptors."""


class DegenerateConfiguration(RegistrationError):
    """Point configuration does not determine a homography."""


class InsufficientMatches(RegistrationError):
    """Fewer than four correspondences."""


class NoConsensus(RegistrationError):
    """RANSAC found fewer inliers than required."""


# Evaluation

class EvaluationError(KeyregError):
    """Scoring failed."""


class EmptyErrorList(EvaluationError):
    """No pair errors to score."""


class UnknownCategory(EvaluationError):
    """Pair category outside {S, P, A}."""


# Datasets and configuration

class DatasetError(KeyregError):
    """Dataset could not be loaded."""


class MissingControlPoints(DatasetError):
    """No ground-truth control point files were found."""


class UnparseablePointFile(DatasetError):
    """Control point file has a malformed line."""


class ConfigError(KeyregError):
    """Invalid configuration."""
