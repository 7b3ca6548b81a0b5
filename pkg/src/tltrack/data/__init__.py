"""Shipped benchmark assets: a two-intersection scenario with confusion
noise, one full occlusion, and a flashing-arrow segment, plus the matching
pipeline configuration (HMM confusion counts mirror the scenario noise)."""

from importlib import resources
from pathlib import Path


def benchmark_scenario_path() -> Path:
    return Path(resources.files(__package__) / "benchmark_scenario.json")


def benchmark_config_path() -> Path:
    return Path(resources.files(__package__) / "benchmark_config.json")
