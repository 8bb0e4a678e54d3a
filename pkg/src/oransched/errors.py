"""Exception hierarchy shared by every module of the package."""


class SchedulerError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SchedulerError, ValueError):
    """Invalid scenario, experiment or scheduler configuration."""


class DegenerateChannelError(SchedulerError):
    def __init__(self, ue, cc, rbg):
        super().__init__(f"rank-zero channel for UE {ue} on RBG ({cc}, {rbg})")
        self.ue, self.cc, self.rbg = ue, cc, rbg


class IllConditionedScheduleError(SchedulerError):
    def __init__(self, cell, cc, rbg, cond):
        super().__init__(
            f"EZF Gram matrix of cell {cell} on RBG ({cc}, {rbg}) has condition number {cond:.3g}")
        self.cell, self.cc, self.rbg, self.cond = cell, cc, rbg, cond


class InconsistentScheduleError(SchedulerError):
    """A JT-UE is not scheduled identically by all of its serving O-RUs."""


class ProtocolError(SchedulerError):
    """A distributed stage did not receive every expected message."""


class BruteForceRefused(SchedulerError):
    """The exhaustive oracle was asked to enumerate too many bits."""
