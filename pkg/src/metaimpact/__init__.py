"""Metaorder market-impact estimation toolkit with a synthetic oracle."""

__version__ = "0.1.0"

from .datamodel import (
    CleaningConfig,
    DailyBar,
    MarketSeries,
    Metaorder,
    Panel,
    clean_panel,
    load_panel,
    metaorder_stats,
    rescaled_log_price,
    signed_sqrt,
    write_panel,
)
from .simulator import (
    FlowParams,
    PropagatorParams,
    SimConfig,
    generate_sign_series,
    modified_propagator_kernel,
    simulate_panel,
)

__all__ = [
    "CleaningConfig",
    "DailyBar",
    "FlowParams",
    "MarketSeries",
    "Metaorder",
    "Panel",
    "PropagatorParams",
    "SimConfig",
    "clean_panel",
    "generate_sign_series",
    "load_panel",
    "metaorder_stats",
    "modified_propagator_kernel",
    "rescaled_log_price",
    "signed_sqrt",
    "simulate_panel",
    "write_panel",
    "__version__",
]
