"""Exception hierarchy shared by all polytree modules."""


class PolytreeError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(PolytreeError, ValueError):
    pass


class Unbounded(PolytreeError):
    pass


class EmptySet(PolytreeError):
    pass


class UndeclaredVariable(PolytreeError, ValueError):
    pass


class ModelFrozen(PolytreeError):
    pass


class NumericalFailure(PolytreeError):
    pass


class UnsupportedFormat(PolytreeError, ValueError):
    pass


class OutOfPartition(PolytreeError):
    pass


class Infeasible(PolytreeError):
    pass


class VolumeRejected(PolytreeError):
    pass


class EmptyTargets(PolytreeError, ValueError):
    pass


class NoInitialBranch(PolytreeError):
    pass


class NotInTree(PolytreeError):
    pass


class NoFeasibleMode(PolytreeError):
    pass


class CorruptFile(PolytreeError, ValueError):
    pass


class ConfigError(PolytreeError, ValueError):
    pass
