"""Configuration-driven experiment runner, reports and the command-line interface."""

from .config import ConfigError, MetricSpec, RunConfig, Variant, load_config, parse_config
from .runner import (
    CSV_COLUMNS,
    Comparison,
    MatrixResult,
    build_dataset,
    compare_schemes,
    consolidate,
    curve_svg_from_rows,
    emit_pck_curve,
    evaluate,
    format_rows,
    read_rows,
    run_matrix,
)
