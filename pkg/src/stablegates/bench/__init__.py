"""Benchmark data pipeline: plant simulation, excitation, noise, normalization, splits."""
from .dataset import (
    Normalization,
    PipelineConfig,
    SequenceDataset,
    SequenceRecord,
    build_fourtank_dataset,
    build_generic_dataset,
    dataset_from_sequences,
    denormalize,
    normalize,
    window_and_split,
)
from .plant import PlantModel, QuadrupleTank, simulate_plant
from .signals import MprsConfig, add_output_noise, mprs_generate

__all__ = [
    "MprsConfig", "Normalization", "PipelineConfig", "PlantModel", "QuadrupleTank",
    "SequenceDataset", "SequenceRecord", "add_output_noise", "build_fourtank_dataset",
    "build_generic_dataset", "dataset_from_sequences", "denormalize", "mprs_generate",
    "normalize", "simulate_plant", "window_and_split",
]
