from .cli import main
from .config import (
    AttackEntry,
    ConfigError,
    DatasetSpec,
    ExperimentConfig,
    ManifoldSpec,
    ModeSpec,
    ProjectionSpec,
    SweepSpec,
    TrainingSpec,
    load_config,
    parse_config,
)
from .curves import CURVE_COLUMNS, aggregate, emit_curves, read_curves, write_svg
from .runner import Cell, cell_key, code_version, grid, run, run_cell

__all__ = [
    "CURVE_COLUMNS",
    "AttackEntry",
    "Cell",
    "ConfigError",
    "DatasetSpec",
    "ExperimentConfig",
    "ManifoldSpec",
    "ModeSpec",
    "ProjectionSpec",
    "SweepSpec",
    "TrainingSpec",
    "aggregate",
    "cell_key",
    "code_version",
    "emit_curves",
    "grid",
    "load_config",
    "main",
    "parse_config",
    "read_curves",
    "run",
    "run_cell",
    "write_svg",
]
