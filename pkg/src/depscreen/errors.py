"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 3, ``NumericError`` to 4.
"""


class DepscreenError(Exception):
    pass


class DataError(DepscreenError):
    pass


class NumericError(DepscreenError):
    pass


# audio_io
class MalformedContainer(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


# segmenter
class RecordingTooShort(DataError):
    pass


class WindowOutOfRange(DataError):
    pass


# dsp
class InvalidFilterSpec(DataError):
    pass


class CutoffTooHigh(DataError):
    pass


class SignalTooShort(DataError):
    pass


class EmptySpectrogram(DataError):
    pass


# dataset
class ManifestParseError(DataError):
    pass


class AlreadySplit(DataError):
    pass


class SingleClass(DataError):
    pass


# nn
class InvalidConfig(DepscreenError):
    pass


class ShapeMismatch(DepscreenError):
    pass


class CheckpointError(DataError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


# trainer
class DivergedImmediately(NumericError):
    pass


class NoDescent(NumericError):
    pass


class BodyNotFrozen(DepscreenError):
    pass


class EmptySplit(DataError):
    pass


# metrics
class LengthMismatch(DataError):
    pass


class Empty(DataError):
    pass
