"""Tail asymptotics and simulation for fluid queues fed by heavy-tailed On-Off flows."""
from __future__ import annotations

__version__ = "0.1.0"

from .asymptotics import (instantaneous_flow_tail, reduced_system_tail, single_flow_tail,
                          tail_bounds, tail_curve, workload_tail)
from .dominance import dominant_sets, drift, minimally_critical_sets
from .errors import (BadPartition, ConfigError, CriticalCase, DomainRefusal, HTQLError, InfeasibleMix,
                     LightRegime, OutOfDomain, RateOrder, TooManyFlows, UnstableSim, UnstableSystem)
from .kappa import KappaEstimate, kappa_j0, kappa_total, p_j0_value
from .manysources import (ClassMix, finite_n_exponent, index_rule, limiting_cumulant,
                          limiting_rate_function)
from .model import (HeavyTailDist, InstantFlow, OnOffFlow, ReducedSystem, SystemSpec, flow_rates,
                    residual_tail, validate_system)
from .simulator import EmpiricalTail, SimConfig, estimate_tail, init_stationary, run_simulation, simulate_workload
