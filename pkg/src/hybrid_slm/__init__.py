"""Desk-scale workbench for designing latency-efficient hybrid small language models."""

from .genome import ArchitectureGenome, ModelSpec, StageSpec, decode, preset, spec_from_codes, uniform_spec
from .latency import LatencyLUT, analytic_lut, estimate, profile
from .model import HybridModel
from .scaling import ScalingLawFit, fit, predict, sweet_spot
from .search import SearchConfig, SearchSpace, Surrogate, run_search
from .trainer import TrainConfig, train

__all__ = ["ArchitectureGenome", "HybridModel", "LatencyLUT", "ModelSpec", "ScalingLawFit", "SearchConfig",
           "SearchSpace", "StageSpec", "Surrogate", "TrainConfig", "analytic_lut", "decode", "estimate", "fit",
           "predict", "preset", "profile", "run_search", "spec_from_codes", "sweet_spot", "train", "uniform_spec"]
__version__ = "0.1.0"
