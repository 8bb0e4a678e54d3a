"""Multi-cell MU-MIMO scheduling with EZF beamforming: a closed-form rate approximation,
centralized and distributed block coordinate descent schedulers, baselines and an
experiment harness."""
from .approx import ApproxCoeffs, build_coeffs
from .central import DEFAULT_RHO, PenaltyObjective, centralized_bcd, objective_G
from .channel import svd_cache
from .distributed import DEFAULT_ALPHA, MessageLedger, run_distributed
from .errors import (BruteForceRefused, ConfigurationError, DegenerateChannelError,
                     IllConditionedScheduleError, InconsistentScheduleError, ProtocolError,
                     SchedulerError)
from .ezf import Schedule, esr_and_sat, exact_rates
from .harness import (ExperimentSpec, Instance, brute_force_optimum, make_instance,
                      run_experiment, run_scheduler, tiny_instance)
from .scenario import GeometrySpec, RfConfig, build_scenario

__version__ = "0.1.0"
