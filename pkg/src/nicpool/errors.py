"""Exception hierarchy shared across the package."""


class NicPoolError(Exception):
    """Base class for every error raised by nicpool."""


# app model
class AppError(NicPoolError):
    pass


class EmptyPipeline(AppError):
    pass


class UnknownUcf(AppError):
    pass


class AbstractionMismatch(AppError):
    pass


class UnknownAccelerator(AppError):
    pass


class BadParams(AppError):
    pass


class TypeMismatch(AppError):
    pass


class UcfPanic(AppError):
    """A user callback raised; the packet is dropped and counted."""


class UnknownSocket(AppError):
    pass


class DuplicateRegistration(AppError):
    pass


# cluster model
class ClusterError(NicPoolError):
    pass


class EmptyCluster(ClusterError):
    pass


class BadAcceleratorKind(ClusterError):
    pass


class NegativeResource(ClusterError):
    pass


class UnknownNic(ClusterError):
    pass


class Insufficient(ClusterError):
    def __init__(self, dimension, nic_id=None):
        self.dimension = dimension
        self.nic_id = nic_id
        where = f" on {nic_id}" if nic_id is not None else ""
        super().__init__(f"insufficient {dimension}{where}")


class GrantReclaimed(ClusterError):
    pass


# profiler / planner
class InsufficientForProfiling(NicPoolError):
    pass


class PlanningError(NicPoolError):
    pass


class EmptyInput(PlanningError):
    pass


class NonPositiveLatency(PlanningError):
    pass


class NonPositiveTarget(PlanningError):
    pass


class NothingPlaceable(PlanningError):
    pass


# dataplane / orchestrator
class GrantMissing(NicPoolError):
    pass


class NoPipeline(NicPoolError):
    pass


class StaleSubpipe(NicPoolError):
    pass


class MigrationBufferOverflow(NicPoolError):
    pass


class DstUnavailable(NicPoolError):
    pass


# state engine
class StateError(NicPoolError):
    pass


class NotFound(StateError):
    pass


class ValueTooLarge(StateError):
    pass


class DuplicateAdd(StateError):
    pass


class NonReducibleUcf(StateError):
    pass


class UnknownApp(StateError):
    pass


# controller
class BackupUnavailable(NicPoolError):
    pass


# scenario
class ConfigError(NicPoolError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(f"{message}{suffix}")


class ValidationError(ConfigError):
    def __init__(self, message, field=None):
        self.field = field
        suffix = f" (field {field!r})" if field is not None else ""
        super().__init__(f"{message}{suffix}")
