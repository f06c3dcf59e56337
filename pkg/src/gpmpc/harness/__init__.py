"""Closed-loop simulation harness and experiment tooling."""

from .config import (ConfigError, GpSettings, ReferenceSettings, ScenarioConfig, WindSettings,
                     config_to_text, load_config, parse_config)
from .episode import (EpisodeResult, FlightLog, extract_disturbance, rms_error, run_episode)
from .experiment import ComparisonReport, compare
from .reference import Reference
from .wind import WindField, WindModel, wind_force

__all__ = [
    "ComparisonReport", "ConfigError", "EpisodeResult", "FlightLog", "GpSettings", "Reference",
    "ReferenceSettings", "ScenarioConfig", "WindField", "WindModel", "WindSettings", "compare",
    "config_to_text", "extract_disturbance", "load_config", "parse_config", "rms_error",
    "run_episode", "wind_force",
]
