"""Scaled BYM2 spatial smoothing for areal counts."""
from .estimator import SpatialPoissonModel
from .graph import Graph, GraphFormatError, besag_precision, connected_components, parse_graph, read_graph
from .inference import Dataset, FitResult, FixedEffects, GridConfig, fit, read_data
from .models import build_latent_model
from .scaling import ScaledStructure, scale_structured

__all__ = [
    "Dataset",
    "FitResult",
    "FixedEffects",
    "Graph",
    "GraphFormatError",
    "GridConfig",
    "ScaledStructure",
    "SpatialPoissonModel",
    "besag_precision",
    "build_latent_model",
    "connected_components",
    "fit",
    "parse_graph",
    "read_data",
    "read_graph",
    "scale_structured",
]
__version__ = "0.1.0"
