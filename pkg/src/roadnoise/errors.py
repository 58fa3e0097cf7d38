"""Exception hierarchy shared by all roadnoise modules."""

from __future__ import annotations


class RoadNoiseError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class InvalidArgument(RoadNoiseError, ValueError):
    pass


class UnsupportedRate(InvalidArgument):
    pass


class TrainingDiverged(RoadNoiseError):
    pass


class InvalidModel(RoadNoiseError):
    pass


class StreamClosed(RoadNoiseError):
    pass
