from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class FusionError(Exception):
    """Base class for every error raised by the fusion toolkit"""

    exit_code = EXIT_NUMERICAL


# Usage / configuration

class ConfigError(FusionError):
    exit_code = EXIT_USAGE


# Data and file errors

class ParseError(FusionError):
    exit_code = EXIT_DATA


class MissingProperty(ParseError):
    pass


class NonMonotonicTimestamps(ParseError):
    pass


class ManifestError(FusionError):
    exit_code = EXIT_DATA


class MissingPose(FusionError):
    exit_code = EXIT_DATA


# Numerical failures

class DegenerateInput(FusionError):
    pass


class EmptyIndex(FusionError):
    pass


class EmptyCloud(FusionError):
    pass


class NoPairsFound(FusionError):
    pass


class NoInliers(FusionError):
    pass


class NoCorrespondences(FusionError):
    pass


class DisconnectedGraph(FusionError):
    pass


class SingularSystem(FusionError):
    pass


class NonConvergence(FusionError):
    pass


class StageError(FusionError):
    """Wraps a failure inside one pipeline stage with its location"""

    def __init__(self, stage: str, cause: FusionError, session_id: Optional[int] = None):
        self.stage = stage
        self.session_id = session_id
        self.cause = cause
        self.exit_code = cause.exit_code
        where = f"stage '{stage}'"
        if session_id is not None:
            where += f", session {session_id}"
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
