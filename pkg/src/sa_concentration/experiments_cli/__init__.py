"""Scenario catalog, validation campaigns and the ``sa-conc`` command line."""
from .scenarios import Scenario, catalog_by_name, check_scenario, load_config, scenario_catalog, scenario_from_config
from .validation import ValidationReport, recompute_verdicts, run_validation
from .cli import main

__all__ = [
    "Scenario",
    "ValidationReport",
    "catalog_by_name",
    "check_scenario",
    "load_config",
    "main",
    "recompute_verdicts",
    "run_validation",
    "scenario_catalog",
    "scenario_from_config",
]
