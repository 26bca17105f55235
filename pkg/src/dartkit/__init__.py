"""Decomposed downscaling of cloud-top brightness temperature with a numpy autodiff core."""

from .decomposition import DANGEROUS, SPLIT_THRESHOLD, decompose, recombine
from .fields import CHANNELS, Field2D, Grid, PredictorStack, SampleRecord
from .synthlab import ScenarioConfig, generate_scenario, load_scenario, save_scenario
from .trainer import TrainConfig, train_from_config

__version__ = "0.1.0"

__all__ = [
    "CHANNELS", "DANGEROUS", "SPLIT_THRESHOLD", "Field2D", "Grid", "PredictorStack", "SampleRecord",
    "ScenarioConfig", "TrainConfig", "decompose", "generate_scenario", "load_scenario", "recombine",
    "save_scenario", "train_from_config",
]
