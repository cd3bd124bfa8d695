"""Exception hierarchy shared by every module of the package."""


class TscError(Exception):
    """Base class for all package errors."""


class ScenarioError(TscError, ValueError):
    """Problem with a scenario document or the network it describes."""


class MalformedDocument(ScenarioError):
    pass


class InvalidTopology(ScenarioError):
    pass


class DanglingReference(ScenarioError):
    pass


class UnsupportedGeometry(ScenarioError):
    pass


class InvalidPlan(ScenarioError):
    pass


class UnknownIntersection(TscError, KeyError):
    pass


class UnknownEntity(TscError, KeyError):
    pass


class PhaseNotAtIntersection(TscError, ValueError):
    pass


class NotActionBoundary(TscError, RuntimeError):
    pass


class EpisodeFinished(TscError, RuntimeError):
    pass


class InvalidAction(TscError, ValueError):
    pass


class ShapeMismatch(TscError, ValueError):
    pass


class MissingGradient(TscError, RuntimeError):
    pass


class BufferNotFull(TscError, RuntimeError):
    pass


class InvalidCycle(TscError, ValueError):
    pass


class CheckpointVersionMismatch(TscError, ValueError):
    pass
