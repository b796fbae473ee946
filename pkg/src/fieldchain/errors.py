"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all fieldchain errors."""


class DegenerateRotation(EngineError):
    """6D rotation input has (near-)parallel or vanishing columns."""


class OutOfImage(EngineError):
    """Pixel coordinate outside the image bounds."""


class BehindCamera(EngineError):
    """Point does not project: z at or behind the image plane."""


class FrozenField(EngineError):
    """Attempted to mutate parameters of a frozen field."""


class EmptyFieldList(EngineError):
    """Rendering requested with no fields."""


class TooFewSamples(EngineError):
    """Per-frame depth normalization needs at least two samples."""


class TooFewFrames(EngineError):
    """Trajectory initialization needs at least the seed frame count."""


class NoFramesLeft(EngineError):
    """Frame append requested but the sequence is exhausted."""


class IndexOutOfOverlap(EngineError):
    """Blend weight requested outside the overlap window."""


class NonFiniteGradient(EngineError):
    """Gradient contained NaN or infinity."""


class IoError(EngineError):
    """File could not be read or written."""


class UnsupportedFormat(EngineError):
    """File extension or content not in a supported format."""


class ResolutionMismatch(EngineError):
    """Loaded map does not match the frame resolution."""


class BadHeader(EngineError):
    """Malformed PFM header."""


class BadMagic(EngineError):
    """Magic number check failed (.flo or checkpoint file)."""


class VersionMismatch(EngineError):
    """Checkpoint written by an incompatible version."""


class CorruptChecksum(EngineError):
    """Checkpoint payload does not match its trailing checksum."""


class ShapeMismatch(EngineError):
    """Operands have incompatible shapes."""
