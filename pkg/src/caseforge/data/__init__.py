from .dataset import (DatasetManifest, GeneratorConfig, SampleRecord, check_invariants,
                      generate_dataset, load_dataset)
from .render import GRAY_WEIGHTS, Outfit, ShapeParams, render_person, to_grayscale
from .sampler import TrainingBatch, sample_batch, sample_indices

__all__ = [
    "DatasetManifest", "GeneratorConfig", "SampleRecord", "check_invariants", "generate_dataset",
    "load_dataset", "GRAY_WEIGHTS", "Outfit", "ShapeParams", "render_person", "to_grayscale",
    "TrainingBatch", "sample_batch", "sample_indices",
]
