"""Deterministic simulator and planning library for rack-scale SmartNIC pools."""

from .app_model import (AccessPattern, AppSpec, FiveTuple, Packet, StageKind, StageSpec, UcfRegistry,
                        app_registry, build_app, default_registry, execute_stage)
from .cluster import AcceleratorKind, Cluster, LatencyModel, ResourceVector, build_cluster
from .controller import Controller, ControllerConfig, Status
from .dataplane import DataplaneConfig, RateSource, SaturatingSource, Simulator, make_flows
from .errors import ConfigError, NicPoolError, ParseError, ValidationError
from .planner import (AllocationPlan, PerfTarget, Placement, ReplicationPlan, compute_allocation, place,
                      plan_replication, rescale)
from .profiler import Profile, TrafficModel, profile
from .scenario import MetricsReport, ScenarioConfig, load_config, parse_config, run_scenario
from .state_engine import StateFabric

__version__ = "0.1.0"

__all__ = [
    "AcceleratorKind", "AccessPattern", "AllocationPlan", "AppSpec", "Cluster", "ConfigError", "Controller",
    "ControllerConfig", "DataplaneConfig", "FiveTuple", "LatencyModel", "MetricsReport", "NicPoolError", "Packet",
    "ParseError", "PerfTarget", "Placement", "Profile", "RateSource", "ReplicationPlan", "ResourceVector",
    "SaturatingSource", "ScenarioConfig", "Simulator", "StageKind", "StageSpec", "StateFabric", "Status",
    "TrafficModel", "UcfRegistry", "ValidationError", "app_registry", "build_app", "build_cluster",
    "compute_allocation", "default_registry", "execute_stage", "load_config", "make_flows", "parse_config", "place",
    "plan_replication", "profile", "rescale", "run_scenario",
]
