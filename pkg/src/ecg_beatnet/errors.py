"""Exception hierarchy.

Every error carries the process exit code the command line maps it to:
1 for usage/config problems, 2 for data/parse problems, 3 for network problems.
"""


class BeatNetError(Exception):
    exit_code = 2


class ConfigError(BeatNetError):
    exit_code = 1


class DataError(BeatNetError):
    exit_code = 2


class NetworkError(BeatNetError):
    exit_code = 3


# wfdb
class MalformedHeader(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class TruncatedSignalFile(DataError):
    pass


class TruncatedAnnotationFile(DataError):
    pass


class UnknownPseudoCodeLayout(DataError):
    pass


class ShapeMismatch(DataError):
    pass


# dataset
class MissingLead(DataError):
    pass


class EmptyClass(DataError):
    pass


class BadCache(DataError):
    pass


# nn / model
class OddLength(ShapeMismatch):
    pass


class NonFiniteError(DataError):
    pass


class StaleCache(BeatNetError):
    pass


class EmptyTrainSet(DataError):
    pass


# checkpoint
class CheckpointError(DataError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    exit_code = 1


class CorruptPayload(CheckpointError):
    pass


# metrics
class EmptyMatrix(DataError):
    pass


class UndefinedMetric(BeatNetError):
    pass


# fetch
class DigestMismatch(DataError):
    pass
