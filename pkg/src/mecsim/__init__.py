"""Discrete-event simulator and real-time emulation cradle for MEC applications."""
from .compute import AdmissionRejected, MecHost, ResourceVector
from .engine import Engine, ModeError, OverrunWarning, SchedulingInPast
from .lifecycle import AppDescriptor, DeviceApp, MecApp, MecSystem, Orchestrator
from .ran import LinearMobility, Position, Ran, Stationary, TraceMobility, WaypointMobility
from .scenario import ParseError, ScenarioConfig, ValidationError, bundled, load_scenario, run
from .servicequeue import BackgroundModel, ServiceQueue, ServiceTimeModel
from .services import LocationService, Rnis, ServiceRegistry
from .stats import Stats

__version__ = "0.1.0"

__all__ = [
    "AdmissionRejected", "AppDescriptor", "BackgroundModel", "DeviceApp", "Engine",
    "LinearMobility", "LocationService", "MecApp", "MecHost", "MecSystem", "ModeError",
    "Orchestrator", "OverrunWarning", "ParseError", "Position", "Ran", "ResourceVector", "Rnis",
    "ScenarioConfig", "SchedulingInPast", "ServiceQueue", "ServiceRegistry", "ServiceTimeModel",
    "Stationary", "Stats", "TraceMobility", "ValidationError", "WaypointMobility", "bundled",
    "load_scenario", "run",
]
